"""Experiment orchestration: training, fine-tuning, evaluation, the comparison matrix."""
from __future__ import annotations

import csv
import enum
import fnmatch
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import tomli
import tomli_w

from . import autodiff as ad
from .autodiff import OptimizerState
from .core import LabeledPointCloud, MetricsReport, PartLabel, compute_metrics, load_cloud, macro_average, \
    pooled_metrics, save_cloud
from .networks import Architecture, Checkpoint, ModelSpec, build_model, check_compatible, geometry, \
    network, predict, stack_geometry
from .networks.layers import Ctx
from .preprocess import BlockSpec, SampledBlock, make_blocks, merge_predictions, read_archive

log = logging.getLogger(__name__)

OFFSETS = (0.0, 5.0)
# epochs when nothing else is asked for; desk and toy runs are budgeted for one core
PRESET_EPOCHS = {"full": 250, "desk": 50, "toy": 50}


class Tag(str, enum.Enum):
    I = "I"
    II = "II"
    III = "III"
    S = "S"
    S_I = "S+I"
    S_II = "S+II"
    S_III = "S+III"

    @property
    def transfer(self) -> bool:
        return self.value.startswith("S+")


# learning rate, batch size, decay step (samples), decay rate, weight decay
OPTIMIZER_PRESETS = {
    Architecture.POINTNET: (0.001, 48, 30000, 0.8, 0.005),
    Architecture.POINTNETPP: (0.005, 12, 200000, 0.7, None),
    Architecture.DGCNN: (0.005, 12, 200000, 0.5, None),
    Architecture.POINTCNN: (0.005, 8, 10000, 0.8, 1e-8),
    Architecture.SHELLNET: (0.005, 12, 5000, 0.8, 1e-8),
    Architecture.RICONV: (0.005, 12, 10000, 0.8, 1e-6),
}


@dataclass
class TrainConfig:
    presets: dict = field(default_factory=lambda: {a: OptimizerState(*v) for a, v in OPTIMIZER_PRESETS.items()})

    def optimizer(self, arch) -> OptimizerState:
        return self.presets[Architecture(arch)].fresh()

    def override(self, arch, **changes) -> "TrainConfig":
        presets = dict(self.presets)
        a = Architecture(arch)
        presets[a] = OptimizerState(**{**presets[a].hyperparameters(), **changes})
        return TrainConfig(presets)


@dataclass
class ExperimentSpec:
    tag: Tag
    train_clouds: list = field(default_factory=list)
    val_fraction: float = 0.20
    pretrain_checkpoint: str | None = None
    finetune_mask: list | None = None  # None: default mask; []: update everything
    epochs: int = 250
    seed: int = 0
    val_clouds: list | None = None  # whole clouds for a separate validation report

    def __post_init__(self):
        self.tag = Tag(self.tag)
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.tag.transfer and not self.pretrain_checkpoint:
            raise ValueError(f"experiment {self.tag.value} needs a pretrain_checkpoint")

    def to_dict(self) -> dict:
        d = {"tag": self.tag.value, "train_clouds": [str(p) for p in self.train_clouds],
             "val_fraction": self.val_fraction, "epochs": self.epochs, "seed": self.seed}
        if self.pretrain_checkpoint:
            d["pretrain_checkpoint"] = str(self.pretrain_checkpoint)
        if self.finetune_mask is not None:
            d["finetune_mask"] = list(self.finetune_mask)
        if self.val_clouds is not None:
            d["val_clouds"] = [str(p) for p in self.val_clouds]
        return d


@dataclass
class RunRecord:
    tag: str
    architecture: str
    seed: int
    train_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    reports: dict = field(default_factory=dict)  # cloud name -> MetricsReport
    wall_clock: float = 0.0
    status: str = "ok"

    def to_json(self) -> str:
        d = asdict(self)
        d["reports"] = {k: _report_dict(r) for k, r in self.reports.items()}
        return json.dumps(d, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        d = json.loads(text)
        d["reports"] = {k: _report_from_dict(r) for k, r in d["reports"].items()}
        return cls(**d)


def _report_dict(r: MetricsReport) -> dict:
    d = {k.name.lower(): [m.re, m.pr, m.iou] for k, m in r.per_class.items()}
    d.update(miou=r.miou, acc=r.acc)
    return d


def _report_from_dict(d: dict) -> MetricsReport:
    from .core import ClassMetrics
    per = {k: ClassMetrics(*d[k.name.lower()]) for k in PartLabel}
    return MetricsReport(per, d["miou"], d["acc"])


# ---------------------------------------------------------------------------
# data

def block_spec_for(model: ModelSpec, base: BlockSpec | None = None) -> BlockSpec:
    return replace(base or BlockSpec(), n_points=model.n_points)


def load_blocks(paths: Iterable, spec: BlockSpec, seed: int = 0, offsets=OFFSETS) -> list[SampledBlock]:
    """Training blocks from clouds (``.xyzl``) or block archives (anything else)."""
    blocks = []
    for i, p in enumerate(paths):
        p = Path(p)
        if p.suffix in (".xyzl", ".txt", ".xyz"):
            blocks += make_blocks(load_cloud(p), spec, offsets, seed=seed + i)
        else:
            bspec, bl = read_archive(p)
            if bspec.n_points != spec.n_points:
                raise ValueError(f"{p}: archive holds {bspec.n_points}-point blocks, model needs {spec.n_points}")
            blocks += bl
    return blocks


def split_blocks(blocks: Sequence, val_fraction: float, seed: int) -> tuple[list, list]:
    """Seeded, disjoint train/validation split of the block list."""
    n = len(blocks)
    perm = np.random.default_rng(np.random.SeedSequence([seed, 7919])).permutation(n)
    n_val = int(round(val_fraction * n)) if n > 1 else 0
    n_val = min(max(n_val, 1 if n > 1 else 0), n - 1)
    val = sorted(perm[:n_val].tolist())
    tr = sorted(perm[n_val:].tolist())
    return [blocks[i] for i in tr], [blocks[i] for i in val]


def default_mask(model: ModelSpec) -> list[str]:
    """Head plus the last two feature layers."""
    feature = [l.name for l in model.layers if l.kind != "head"]
    return ["head.*"] + [f"{n}.*" for n in feature[-2:]]


def frozen_patterns(model: ModelSpec, params: dict, mask: Sequence[str]) -> tuple[str, ...]:
    """Names of parameters not matched by any mask pattern (empty mask: nothing frozen)."""
    if not mask:
        return ()
    return tuple(sorted(n for n in params if not any(fnmatch.fnmatchcase(n, p) for p in mask)))


# ---------------------------------------------------------------------------
# training

class _Batcher:
    """Block tensors with per-block geometry computed once and reused every epoch."""

    def __init__(self, model: ModelSpec, blocks: Sequence[SampledBlock]):
        self.model = model
        self.pos = np.stack([b.centered() for b in blocks]) if blocks else np.zeros((0, model.n_points, 3))
        self.labels = np.stack([b.labels for b in blocks]) if blocks else np.zeros((0, model.n_points), int)
        self._geom: list = [None] * len(blocks)

    def __len__(self) -> int:
        return len(self.pos)

    def geom(self, idx) -> dict:
        for i in idx:
            if self._geom[i] is None:
                self._geom[i] = geometry(self.model, self.pos[i:i + 1])
        return stack_geometry(self._geom[i] for i in idx)

    def batches(self, size: int, order=None):
        order = np.arange(len(self)) if order is None else order
        for s in range(0, len(order), size):
            idx = order[s:s + size]
            yield self.pos[idx], self.labels[idx], self.geom(idx)


def _step(ck: Checkpoint, opt: OptimizerState, pos, lab, geom, frozen) -> tuple[float, int]:
    ctx = Ctx(ck.params, ck.buffers, training=True, frozen=frozen, grad=True)
    with ad.Tape() as tape:
        z = network(ctx, ck.spec, pos, geom)
        loss = ad.softmax_cross_entropy(z, lab)
        tape.backward(loss)
    ad.adam_step(ck.params, ctx.gradients(), opt, n_samples=len(pos))
    return loss.item(), int((z.data.argmax(-1) == lab).sum())


def _score(ck: Checkpoint, data: _Batcher, batch: int = 16) -> tuple[float, float]:
    if not len(data):
        return float("nan"), float("nan")
    tot, correct = 0.0, 0
    for pos, lab, g in data.batches(batch):
        p = predict(ck, pos, g)
        picked = np.take_along_axis(p, lab[..., None], axis=-1)[..., 0]
        tot += -np.log(np.maximum(picked, 1e-300)).sum()
        correct += int((p.argmax(-1) == lab).sum())
    n = data.labels.size
    return tot / n, correct / n


def initial_checkpoint(exp: ExperimentSpec, model: ModelSpec) -> Checkpoint:
    if exp.pretrain_checkpoint:
        ck = Checkpoint.load(exp.pretrain_checkpoint)
        check_compatible(ck, model)
        ck = Checkpoint(model, ck.params, ck.buffers, dict(ck.provenance))  # optimizer state is not carried over
    else:
        ck = build_model(model, exp.seed)
    ck.provenance.update(tag=exp.tag.value, seed=exp.seed)
    return ck


def train(exp: ExperimentSpec, model: ModelSpec, config: TrainConfig | None = None,
          blocks: Sequence[SampledBlock] | None = None, block_spec: BlockSpec | None = None,
          progress: Callable | None = None,
          validation: Sequence[SampledBlock] | None = None) -> tuple[Checkpoint, RunRecord]:
    """Mini-batch training with the architecture's preset; the last epoch's weights are returned.

    ``blocks`` may be given directly, otherwise they are made from
    ``exp.train_clouds``.  The experiment's val_fraction of them is held out
    for per-epoch validation unless ``validation`` blocks are passed, in which
    case every block in ``blocks`` is trained on.  ``progress(epoch, record)``
    is called after every epoch; a true return value ends training there.
    """
    config = config or TrainConfig()
    t0 = time.perf_counter()
    ck = initial_checkpoint(exp, model)
    if blocks is None:
        blocks = load_blocks(exp.train_clouds, block_spec_for(model, block_spec), exp.seed)
    if not len(blocks):
        raise ValueError("no training blocks")
    if any(b.labels is None for b in blocks):
        raise ValueError("training blocks must be labelled")
    if validation is None:
        tr_blocks, va_blocks = split_blocks(blocks, exp.val_fraction, exp.seed)
    else:
        tr_blocks, va_blocks = list(blocks), list(validation)
    tr, va = _Batcher(model, tr_blocks), _Batcher(model, va_blocks)
    opt = config.optimizer(model.architecture)  # a fine-tune starts a fresh schedule
    frozen = ()
    if exp.tag.transfer:
        mask = default_mask(model) if exp.finetune_mask is None else exp.finetune_mask
        frozen = frozen_patterns(model, ck.params, mask)
    rec = RunRecord(exp.tag.value, model.architecture.value, exp.seed)
    for epoch in range(exp.epochs):
        order = np.random.default_rng(np.random.SeedSequence([exp.seed, epoch])).permutation(len(tr))
        loss_sum, correct = 0.0, 0
        for pos, lab, g in tr.batches(opt.batch_size, order):
            l, c = _step(ck, opt, pos, lab, g, frozen)
            loss_sum += l * lab.size
            correct += c
        rec.train_loss.append(loss_sum / tr.labels.size)
        rec.train_acc.append(correct / tr.labels.size)
        vl, vacc = _score(ck, va)
        rec.val_loss.append(vl)
        rec.val_acc.append(vacc)
        if progress and progress(epoch, rec):
            break  # diagnostics only; the experiment protocol never stops early
        log.info("%s %s epoch %d loss %.4f acc %.4f val %.4f", exp.tag.value, model.architecture.value,
                 epoch, rec.train_loss[-1], rec.train_acc[-1], vacc)
    ck.provenance["epochs"] = int(ck.provenance.get("epochs", 0) or 0) + len(rec.train_loss)
    if rec.train_loss:
        ck.optimizer = opt
    if exp.val_clouds:
        rec.reports = evaluate(ck, exp.val_clouds, block_spec_for(model, block_spec), exp.seed).per_cloud
    rec.wall_clock = time.perf_counter() - t0
    return ck, rec


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class Evaluation:
    per_cloud: dict  # name -> MetricsReport
    macro: MetricsReport
    pooled: MetricsReport
    predictions: dict = field(default_factory=dict, repr=False)


def block_scores(ck: Checkpoint, blocks: Sequence[SampledBlock], batch: int = 16) -> list[np.ndarray]:
    out = []
    for s in range(0, len(blocks), batch):
        chunk = blocks[s:s + batch]
        pos = np.stack([b.centered() for b in chunk])
        out += list(predict(ck, pos, geometry(ck.spec, pos)))
    return out


def predict_cloud(ck: Checkpoint | None, cloud: LabeledPointCloud, spec: BlockSpec | None = None,
                  seed: int = 0, scorer: Callable | None = None) -> np.ndarray:
    """Full-cloud labels: blocks at both offsets, per-block scores, max-merge."""
    n = ck.spec.n_points if ck is not None else (spec or BlockSpec()).n_points
    spec = replace(spec or BlockSpec(), n_points=n)
    blocks = make_blocks(cloud, spec, OFFSETS, seed=seed, keep_remainder=True)
    scores = [scorer(b) for b in blocks] if scorer is not None else block_scores(ck, blocks)
    return merge_predictions(len(cloud), zip(blocks, scores))


def evaluate(ck: Checkpoint | None, test_clouds: Sequence, spec: BlockSpec | None = None, seed: int = 0,
             scorer: Callable | None = None) -> Evaluation:
    """Per-cloud metrics of merged block predictions, with their macro and pooled summaries.

    ``scorer`` replaces the model's forward pass (block -> scores), which is
    how plumbing is tested with oracle predictions.
    """
    per, preds = {}, {}
    for item in test_clouds:
        cloud = item if isinstance(item, LabeledPointCloud) else load_cloud(item)
        if cloud.labels is None:
            raise ValueError(f"{cloud.name or item}: evaluation needs labels")
        pred = predict_cloud(ck, cloud, spec, seed, scorer)
        name = cloud.name or str(item)
        per[name] = compute_metrics(pred, cloud.labels)
        preds[name] = pred
    reports = list(per.values())
    return Evaluation(per, macro_average(reports), pooled_metrics(reports), preds)


def segment(ck: Checkpoint, cloud_path, out_path, spec: BlockSpec | None = None, seed: int = 0) -> MetricsReport | None:
    """Write the cloud with predicted labels; a labelled input also gets a metrics CSV next to it."""
    cloud = load_cloud(cloud_path)
    pred = predict_cloud(ck, cloud, spec, seed)
    save_cloud(LabeledPointCloud(cloud.positions, pred, cloud.name), out_path)
    if cloud.labels is None:
        return None
    report = compute_metrics(pred, cloud.labels)
    report.to_csv(Path(out_path).with_suffix(".metrics.csv"))
    return report


# ---------------------------------------------------------------------------
# experiment matrix

CLASS_ROWS = (("Flower", PartLabel.FLOWER), ("Leaf", PartLabel.LEAF), ("Stem", PartLabel.STEM), ("MIoU", None))


def _iou(report: MetricsReport, label) -> float:
    return report.miou if label is None else report.per_class[label].iou


def comparison_table(cells: dict, architectures: Sequence[str], base: str = "III",
                     transfer: str = "S+III") -> list[list]:
    """Rows Flower/Leaf/Stem/MIoU, each with base, transfer and Gain lines; one column per architecture.

    ``cells`` maps (architecture, tag) to a MetricsReport.  Values are
    unrounded floats; Gain is the plain difference of the two cells.
    """
    rows = [["metric", "experiment"] + list(architectures)]
    tags = [t for t in (base, transfer) if any((a, t) in cells for a in architectures)]
    for name, label in CLASS_ROWS:
        for t in tags:
            rows.append([name, t] + [_iou(cells[(a, t)], label) if (a, t) in cells else "" for a in architectures])
        if len(tags) == 2:
            gain = []
            for a in architectures:
                if (a, base) in cells and (a, transfer) in cells:
                    gain.append(_iou(cells[(a, transfer)], label) - _iou(cells[(a, base)], label))
                else:
                    gain.append("")
            rows.append([name, "Gain"] + gain)
    return rows


def _write_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def run_matrix(models: Sequence[ModelSpec], experiments: Sequence[ExperimentSpec], out_dir, test_clouds: Sequence,
               config: TrainConfig | None = None, block_spec: BlockSpec | None = None,
               base: str = "III", transfer: str = "S+III") -> list[list]:
    """Train and evaluate every (architecture, experiment) cell; failed cells are logged and skipped.

    ``pretrain_checkpoint`` may contain ``{arch}`` and ``{out}``, filled per
    cell, so an S cell earlier in the list can feed the S+ cells.  Writes
    ``cells.csv`` (one row per cell) and ``comparison.csv``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells, rows = {}, [["architecture", "experiment", "status", "flower", "leaf", "stem", "miou", "acc"]]
    for model in models:
        arch = model.architecture.value
        for exp in experiments:
            cell_dir = out / exp.tag.value
            cell_dir.mkdir(exist_ok=True)
            try:
                e = exp
                if exp.pretrain_checkpoint:
                    e = replace(exp, pretrain_checkpoint=str(exp.pretrain_checkpoint).format(arch=arch, out=out))
                ck, rec = train(e, model, config, block_spec=block_spec)
                ck.save(cell_dir / f"{arch}.rpt")
                ev = evaluate(ck, test_clouds, block_spec)
                rec.reports = ev.per_cloud
                cells[(arch, exp.tag.value)] = ev.macro
                m = ev.macro
                rows.append([arch, exp.tag.value, "ok"] + [_iou(m, lab) for _, lab in CLASS_ROWS] + [m.acc])
            except Exception as err:  # a failed cell must not stop the matrix
                log.exception("cell %s/%s failed", arch, exp.tag.value)
                rec = RunRecord(exp.tag.value, arch, exp.seed, status=f"failed: {err}")
                rows.append([arch, exp.tag.value, rec.status, "", "", "", "", ""])
            (cell_dir / f"{arch}.json").write_text(rec.to_json())
    _write_csv(rows, out / "cells.csv")
    table = comparison_table(cells, [m.architecture.value for m in models], base, transfer)
    _write_csv(table, out / "comparison.csv")
    return table


def read_table(path) -> list[list]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return [rows[0]] + [r[:2] + [float(v) if v else None for v in r[2:]] for r in rows[1:]]


def bar_chart(reports: dict, path, title: str = "per-class IoU") -> None:
    """Grouped SVG bar chart: one group per class, one bar per labelled report."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = [n for n, _ in CLASS_ROWS]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.8 / max(len(reports), 1)
    for i, (label, rep) in enumerate(reports.items()):
        vals = [_iou(rep, lab) for _, lab in CLASS_ROWS]
        ax.bar(np.arange(len(names)) + i * width, vals, width, label=label)
    ax.set_xticks(np.arange(len(names)) + 0.4 - width / 2)
    ax.set_xticklabels(names)
    ax.set_ylim(0, 1)
    ax.set_ylabel("IoU")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


# ---------------------------------------------------------------------------
# text configs

def load_config(path) -> tuple[ExperimentSpec | None, ModelSpec | None, dict]:
    """Read [experiment], [model] and [optimizer] sections from a TOML file."""
    with open(path, "rb") as fh:
        d = tomli.load(fh)
    exp = ExperimentSpec(**d["experiment"]) if "experiment" in d else None
    model = ModelSpec.from_dict(d["model"]) if "model" in d else None
    return exp, model, d.get("optimizer", {})


def dump_config(path, exp: ExperimentSpec | None = None, model: ModelSpec | None = None,
                optimizer: dict | None = None) -> None:
    d = {}
    if exp is not None:
        d["experiment"] = exp.to_dict()
    if model is not None:
        d["model"] = model.to_dict()
    if optimizer:
        d["optimizer"] = {k: v for k, v in optimizer.items() if v is not None}
    Path(path).write_text(tomli_w.dumps(d))
