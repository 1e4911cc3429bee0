"""Domain types, XYZL point-cloud I/O, label taxonomy and segmentation metrics."""
from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

N_CLASSES = 3


class PartLabel(enum.IntEnum):
    FLOWER = 0
    LEAF = 1
    STEM = 2


class OrganLabel(enum.IntEnum):
    LEAFLET = 0
    PETIOLE = 1
    STEM = 2
    STIPULE = 3
    PETAL = 4
    SEPAL = 5
    RECEPTACLE = 6


ORGAN_TO_PART = {
    OrganLabel.LEAFLET: PartLabel.LEAF,
    OrganLabel.PETIOLE: PartLabel.STEM,
    OrganLabel.STEM: PartLabel.STEM,
    OrganLabel.STIPULE: PartLabel.STEM,
    OrganLabel.PETAL: PartLabel.FLOWER,
    OrganLabel.SEPAL: PartLabel.FLOWER,
    OrganLabel.RECEPTACLE: PartLabel.FLOWER,
}

# lookup table indexed by organ code
_ORGAN_LUT = np.array([ORGAN_TO_PART[o] for o in OrganLabel], dtype=np.int64)


class CloudFormatError(ValueError):
    """Malformed XYZL content; ``line`` is 1-based."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class LabelError(CloudFormatError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LabeledPointCloud:
    positions: np.ndarray
    labels: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        pos = np.array(self.positions, dtype=np.float64).reshape(-1, 3)
        if len(pos) < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.isfinite(pos).all():
            raise ValueError("point cloud has non-finite coordinates")
        object.__setattr__(self, "positions", _frozen(pos))
        if self.labels is not None:
            lab = np.array(self.labels, dtype=np.int64).reshape(-1)
            if len(lab) != len(pos):
                raise ValueError(f"{len(pos)} positions but {len(lab)} labels")
            if len(lab) and (lab.min() < 0 or lab.max() >= N_CLASSES):
                raise LabelError("label outside {0,1,2}")
            object.__setattr__(self, "labels", _frozen(lab))

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def with_labels(self, labels) -> "LabeledPointCloud":
        return LabeledPointCloud(self.positions, labels, self.name)


# ---------------------------------------------------------------------------
# XYZL I/O


def _parse_slow(lines: Sequence[str]) -> tuple[np.ndarray, np.ndarray | None]:
    rows, labs = [], []
    width = None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) not in (3, 4):
            raise CloudFormatError(f"expected 3 or 4 fields, got {len(parts)}", lineno)
        if width is None:
            width = len(parts)
        elif len(parts) != width:
            raise CloudFormatError("inconsistent column count", lineno)
        try:
            xyz = [float(v) for v in parts[:3]]
        except ValueError:
            raise CloudFormatError(f"bad coordinate in {line!r}", lineno) from None
        if not all(np.isfinite(xyz)):
            raise CloudFormatError("non-finite coordinate", lineno)
        rows.append(xyz)
        if width == 4:
            try:
                lab = int(parts[3])
            except ValueError:
                raise CloudFormatError(f"bad label {parts[3]!r}", lineno) from None
            if lab not in (0, 1, 2):
                raise LabelError(f"label {lab} outside {{0,1,2}}", lineno)
            labs.append(lab)
    if not rows:
        raise CloudFormatError("no points in file")
    pos = np.asarray(rows, dtype=np.float64)
    return pos, (np.asarray(labs, dtype=np.int64) if width == 4 else None)


def load_cloud(path) -> LabeledPointCloud:
    path = Path(path)
    text = path.read_text()
    try:
        arr = np.loadtxt(io.StringIO(text), comments="#", ndmin=2)
        ok = arr.size > 0 and arr.shape[1] in (3, 4) and np.isfinite(arr).all()
        if ok and arr.shape[1] == 4:
            lab = arr[:, 3]
            ok = bool(np.all(lab == np.round(lab)) and lab.min() >= 0 and lab.max() <= 2)
    except ValueError:
        ok = False
    if ok:
        pos = arr[:, :3]
        labels = arr[:, 3].astype(np.int64) if arr.shape[1] == 4 else None
    else:
        # the slow path reports the offending line
        pos, labels = _parse_slow(text.splitlines())
    return LabeledPointCloud(pos, labels, name=path.stem)


def save_cloud(cloud: LabeledPointCloud, path) -> None:
    path = Path(path)
    if cloud.labels is None:
        np.savetxt(path, cloud.positions, fmt="%.6f", delimiter=" ")
    else:
        data = np.column_stack([cloud.positions, cloud.labels])
        np.savetxt(path, data, fmt=["%.6f", "%.6f", "%.6f", "%d"], delimiter=" ")


# ---------------------------------------------------------------------------
# labels


def merge_organ_labels(fine: Iterable) -> list[PartLabel]:
    return [ORGAN_TO_PART[OrganLabel(o)] for o in fine]


def merge_organ_codes(codes: np.ndarray) -> np.ndarray:
    """Vectorised organ-code -> part-code mapping."""
    return _ORGAN_LUT[np.asarray(codes, dtype=np.int64)]


def class_distribution(labels) -> np.ndarray:
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    if lab.size == 0:
        raise ValueError("class_distribution of an empty label list")
    return np.bincount(lab, minlength=N_CLASSES) / lab.size


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class ConfusionCounts:
    tp: tuple[int, int, int]
    fp: tuple[int, int, int]
    fn: tuple[int, int, int]
    total: int

    @classmethod
    def from_labels(cls, pred, gt) -> "ConfusionCounts":
        pred = np.asarray(pred, dtype=np.int64).reshape(-1)
        gt = np.asarray(gt, dtype=np.int64).reshape(-1)
        if len(pred) != len(gt):
            raise ValueError(f"length mismatch: pred {len(pred)} vs gt {len(gt)}")
        if len(gt) == 0:
            raise ValueError("metrics need at least one point")
        cm = np.bincount(gt * N_CLASSES + pred, minlength=N_CLASSES**2).reshape(N_CLASSES, N_CLASSES)
        tp = np.diag(cm)
        fp = cm.sum(axis=0) - tp
        fn = cm.sum(axis=1) - tp
        return cls(tuple(map(int, tp)), tuple(map(int, fp)), tuple(map(int, fn)), int(cm.sum()))

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            tuple(a + b for a, b in zip(self.tp, other.tp)),
            tuple(a + b for a, b in zip(self.fp, other.fp)),
            tuple(a + b for a, b in zip(self.fn, other.fn)),
            self.total + other.total,
        )


def _ratio(num: int, den: int) -> float:
    # zero denominators only arise for classes absent from pred and/or gt
    return 1.0 if den == 0 else num / den


@dataclass(frozen=True)
class ClassMetrics:
    re: float
    pr: float
    iou: float


@dataclass(frozen=True)
class MetricsReport:
    per_class: dict
    miou: float
    acc: float
    counts: ConfusionCounts | None = field(default=None, compare=False)

    @classmethod
    def from_counts(cls, c: ConfusionCounts) -> "MetricsReport":
        per = {}
        for k in PartLabel:
            tp, fp, fn = c.tp[k], c.fp[k], c.fn[k]
            per[k] = ClassMetrics(_ratio(tp, tp + fn), _ratio(tp, tp + fp), _ratio(tp, tp + fn + fp))
        miou = float(np.mean([m.iou for m in per.values()]))
        return cls(per, miou, sum(c.tp) / c.total, c)

    def rows(self) -> list[tuple[str, float | str, float | str, float | str]]:
        out = [(k.name.lower(), m.re, m.pr, m.iou) for k, m in self.per_class.items()]
        out.append(("miou", "", "", self.miou))
        out.append(("acc", "", "", self.acc))
        return out

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "recall", "precision", "iou"])
        for name, re, pr, iou in self.rows():
            w.writerow([name] + [f"{v:.6f}" if isinstance(v, float) else v for v in (re, pr, iou)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def compute_metrics(pred, gt) -> MetricsReport:
    return MetricsReport.from_counts(ConfusionCounts.from_labels(pred, gt))


def macro_average(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Mean of per-model metrics (the default way results are averaged over test plants)."""
    if not reports:
        raise ValueError("no reports to average")
    per = {}
    for k in PartLabel:
        per[k] = ClassMetrics(
            float(np.mean([r.per_class[k].re for r in reports])),
            float(np.mean([r.per_class[k].pr for r in reports])),
            float(np.mean([r.per_class[k].iou for r in reports])),
        )
    return MetricsReport(per, float(np.mean([r.miou for r in reports])), float(np.mean([r.acc for r in reports])))


def pooled_metrics(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Metrics of the summed confusion counts of all reports."""
    total = None
    for r in reports:
        if r.counts is None:
            raise ValueError("pooled metrics need reports carrying counts")
        total = r.counts if total is None else total + r.counts
    if total is None:
        raise ValueError("no reports to pool")
    return MetricsReport.from_counts(total)
