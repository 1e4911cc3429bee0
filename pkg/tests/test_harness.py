import numpy as np
import pytest

from rosepoint.core import PartLabel, class_distribution, compute_metrics, load_cloud, save_cloud
from rosepoint.harness import (OPTIMIZER_PRESETS, ExperimentSpec, RunRecord, Tag, TrainConfig, bar_chart,
                               comparison_table, default_mask, dump_config, evaluate, frozen_patterns, load_config,
                               read_table, run_matrix, segment, split_blocks, train)
from rosepoint.networks import Architecture, build_model, default_spec
from rosepoint.preprocess import BlockSpec, make_blocks
from rosepoint.synthgen import PlantParams, generate_plant, sample_mesh

TOY = BlockSpec(n_points=32)


@pytest.fixture(scope="module")
def clouds(tmp_path_factory):
    """Two sparse labelled plants on disk (a few hundred points each)."""
    d = tmp_path_factory.mktemp("clouds")
    paths = []
    for s in (1, 2):
        p = d / f"plant{s}.xyzl"
        save_cloud(sample_mesh(generate_plant(PlantParams(), s), 0.25, seed=s, name=p.stem), p)
        paths.append(p)
    return paths


@pytest.fixture(scope="module")
def toy_blocks(clouds):
    return make_blocks(load_cloud(clouds[0]), TOY, seed=0)


def exp(tag="S", **kw):
    return ExperimentSpec(tag, **{"epochs": 2, "seed": 0, **kw})


def test_table3_presets():
    cfg = TrainConfig()
    got = {a: tuple(cfg.optimizer(a).hyperparameters().values()) for a in Architecture}
    assert got == OPTIMIZER_PRESETS
    assert got[Architecture.POINTNET] == (0.001, 48, 30000, 0.8, 0.005)
    assert cfg.optimizer("PointNet") is not cfg.optimizer("PointNet")


def test_experiment_validation():
    with pytest.raises(ValueError):
        ExperimentSpec("S+I")
    with pytest.raises(ValueError):
        ExperimentSpec("S", val_fraction=1.0)
    assert Tag("S+II").transfer and not Tag("III").transfer


def test_split_disjoint_and_stable():
    items = list(range(100))
    tr, va = split_blocks(items, 0.2, 3)
    assert len(va) == 20 and not set(tr) & set(va) and set(tr) | set(va) == set(items)
    assert split_blocks(items, 0.2, 3) == (tr, va)


def test_zero_epochs_is_initialisation(toy_blocks):
    spec = default_spec("PointNet", "toy")
    ck, rec = train(exp(epochs=0), spec, blocks=toy_blocks)
    ref = build_model(spec, 0)
    assert all(np.array_equal(ck.params[k], ref.params[k]) for k in ref.params)
    assert rec.train_loss == [] and ck.provenance["epochs"] == 0


def test_zero_epochs_transfer_keeps_pretrained(toy_blocks, tmp_path):
    spec = default_spec("PointNet", "toy")
    pre, _ = train(exp(epochs=1), spec, blocks=toy_blocks)
    pre.save(tmp_path / "pre.rpt")
    ck, _ = train(exp("S+I", epochs=0, pretrain_checkpoint=str(tmp_path / "pre.rpt")), spec, blocks=toy_blocks)
    assert all(np.array_equal(ck.params[k], pre.params[k]) for k in pre.params)


def test_training_is_reproducible(toy_blocks):
    spec = default_spec("DGCNN", "toy")
    a, ra = train(exp(), spec, blocks=toy_blocks)
    b, rb = train(exp(), spec, blocks=toy_blocks)
    assert ra.train_loss == rb.train_loss and ra.val_acc == rb.val_acc
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert len(ra.train_loss) == len(ra.val_loss) == 2


@pytest.mark.parametrize("mask", [None, [], ["head.out.*"]])
def test_finetune_mask(mask, toy_blocks, tmp_path):
    spec = default_spec("PointNetPP", "toy")
    pre = build_model(spec, 9)
    pre.save(tmp_path / "pre.rpt")
    ck, _ = train(exp("S+III", pretrain_checkpoint=str(tmp_path / "pre.rpt"), finetune_mask=mask),
                  spec, blocks=toy_blocks)
    frozen = set(frozen_patterns(spec, pre.params, default_mask(spec) if mask is None else mask))
    assert frozen or mask == []
    for k in pre.params:
        same = np.array_equal(ck.params[k], pre.params[k])
        assert same if k in frozen else not same, k


def test_default_mask_targets_head_and_last_layers():
    spec = default_spec("PointNetPP", "toy")
    assert default_mask(spec) == ["head.*", "fp4.*", "fp5.*"]


def test_overfit_two_blocks(toy_blocks):
    two = toy_blocks[:2]
    _, rec = train(exp(epochs=60), default_spec("PointNet", "desk", n_points=32), blocks=two, validation=[])
    assert max(rec.train_acc) >= 0.95


# -- evaluation --------------------------------------------------------------

def test_oracle_scorer_gives_perfect_metrics(clouds):
    ev = evaluate(None, clouds, TOY, scorer=lambda b: np.eye(3)[b.labels])
    assert all(r.acc == 1.0 and r.miou == 1.0 for r in ev.per_cloud.values())
    assert ev.macro.acc == 1.0


def test_constant_leaf_baseline(clouds):
    ev = evaluate(None, clouds[:1], TOY, scorer=lambda b: np.tile([0.0, 1.0, 0.0], (len(b.positions), 1)))
    leaf = class_distribution(load_cloud(clouds[0]).labels)[PartLabel.LEAF]
    assert ev.macro.acc == pytest.approx(leaf, abs=1e-12)


def test_metrics_recomputed_from_labels(clouds):
    ck = build_model(default_spec("ShellNet", "toy"), 0)
    ev = evaluate(ck, clouds, TOY)
    for name, rep in ev.per_cloud.items():
        again = compute_metrics(ev.predictions[name], load_cloud(clouds[0 if "1" in name else 1]).labels)
        assert again == rep


def test_segment_round_trip_and_determinism(clouds, tmp_path):
    ck = build_model(default_spec("PointNet", "toy"), 0)
    rep = segment(ck, clouds[0], tmp_path / "a.xyzl")
    segment(ck, clouds[0], tmp_path / "b.xyzl")
    src, a = load_cloud(clouds[0]), load_cloud(tmp_path / "a.xyzl")
    assert len(a) == len(src) and np.abs(a.positions - src.positions).max() < 1e-6
    assert (tmp_path / "a.xyzl").read_bytes() == (tmp_path / "b.xyzl").read_bytes()
    assert rep == compute_metrics(a.labels, src.labels)
    assert (tmp_path / "a.metrics.csv").exists()


# -- matrix and reports --------------------------------------------------------

def test_comparison_table_gain_is_exact_difference():
    F, L, S = PartLabel
    r = lambda p, g: compute_metrics(p, g)
    cells = {("A", "III"): r([0, 1, 1, 2], [0, 1, 2, 2]), ("A", "S+III"): r([0, 1, 2, 2], [0, 1, 2, 1])}
    rows = comparison_table(cells, ["A"])
    assert [row[:2] for row in rows[1:4]] == [["Flower", "III"], ["Flower", "S+III"], ["Flower", "Gain"]]
    assert [row[0] for row in rows[1:]] == ["Flower"] * 3 + ["Leaf"] * 3 + ["Stem"] * 3 + ["MIoU"] * 3
    for k in range(1, len(rows), 3):
        assert rows[k + 2][2] == rows[k + 1][2] - rows[k][2]


def test_run_matrix_end_to_end(clouds, tmp_path):
    exps = [exp("S", epochs=1, train_clouds=[str(clouds[0])]),
            exp("III", epochs=1, train_clouds=[str(clouds[1])]),
            exp("S+III", epochs=1, train_clouds=[str(clouds[1])], pretrain_checkpoint="{out}/S/{arch}.rpt"),
            exp("S+II", epochs=1, train_clouds=[str(clouds[1])], pretrain_checkpoint="{out}/missing.rpt")]
    models = [default_spec("PointNet", "toy")]
    run_matrix(models, exps, tmp_path, [clouds[1]], block_spec=TOY)
    status = {r[1]: r for r in _rows(tmp_path / "cells.csv")}
    assert status["S+II"][2].startswith("failed")
    assert all(status[t][2] == "ok" for t in ("S", "III", "S+III"))
    table = read_table(tmp_path / "comparison.csv")
    assert len(table) == 1 + 4 * 3
    for k in range(1, len(table), 3):
        assert table[k + 2][2] == table[k + 1][2] - table[k][2]
    rec = RunRecord.from_json((tmp_path / "S+III" / "PointNet.json").read_text())
    assert rec.status == "ok" and len(rec.train_loss) == 1 and rec.reports


def _rows(path):
    import csv
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_config_round_trip(tmp_path):
    e = ExperimentSpec("S+I", ["a.xyzl"], pretrain_checkpoint="p.rpt", finetune_mask=["head.*"], epochs=3)
    m = default_spec("RIConv", "toy")
    dump_config(tmp_path / "c.toml", e, m, {"learning_rate": 0.01})
    e2, m2, o2 = load_config(tmp_path / "c.toml")
    assert e2 == e and m2 == m and o2 == {"learning_rate": 0.01}


def test_bar_chart_svg(tmp_path):
    bar_chart({"x": compute_metrics([0, 1, 2], [0, 1, 1])}, tmp_path / "c.svg")
    assert (tmp_path / "c.svg").read_text().lstrip().startswith("<?xml")
