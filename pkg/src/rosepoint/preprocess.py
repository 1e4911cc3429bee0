"""Cubic block partitioning, voxel balancing, fixed-size sampling and prediction merging."""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import N_CLASSES, LabeledPointCloud


class CoverageError(RuntimeError):
    def __init__(self, missing: np.ndarray):
        self.missing = np.asarray(missing)
        shown = ", ".join(map(str, self.missing[:20]))
        more = "" if len(self.missing) <= 20 else f", ... ({len(self.missing)} total)"
        super().__init__(f"points covered by no block: {shown}{more}")


@dataclass(frozen=True)
class BlockSpec:
    edge: float = 10.0
    offset: float = 0.0
    n_points: int = 4096
    min_fraction: float = 0.10
    voxel_grid: float = 0.2

    def __post_init__(self):
        if self.edge <= 0:
            raise ValueError("edge must be positive")
        if not 0 <= self.offset < self.edge:
            raise ValueError("offset must lie in [0, edge)")
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")
        if not 0 < self.min_fraction < 1:
            raise ValueError("min_fraction must lie in (0, 1)")
        if not 0 < self.voxel_grid < self.edge:
            raise ValueError("voxel_grid must lie in (0, edge)")

    @property
    def threshold(self) -> float:
        return self.min_fraction * self.n_points


@dataclass(frozen=True)
class RawBlock:
    cell_index: tuple[int, int, int]
    point_indices: np.ndarray


@dataclass(frozen=True)
class SampledBlock:
    positions: np.ndarray
    source_indices: np.ndarray
    labels: np.ndarray | None
    block_origin: np.ndarray
    edge: float = 10.0
    offset: float = 0.0

    @property
    def center(self) -> np.ndarray:
        return self.block_origin + 0.5 * self.edge

    def centered(self) -> np.ndarray:
        """Network input coordinates: positions relative to the block centre."""
        return self.positions - self.center


def _grid_origin(cloud: LabeledPointCloud, spec: BlockSpec) -> np.ndarray:
    return cloud.positions.min(axis=0) - spec.offset


def cell_of(positions: np.ndarray, origin: np.ndarray, edge: float) -> np.ndarray:
    return np.floor((positions - origin) / edge).astype(np.int64)


def partition(cloud: LabeledPointCloud, spec: BlockSpec) -> list[RawBlock]:
    cells = cell_of(cloud.positions, _grid_origin(cloud, spec), spec.edge)
    uniq, inverse = np.unique(cells, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind="stable")
    bounds = np.searchsorted(inverse[order], np.arange(len(uniq) + 1))
    return [RawBlock(tuple(int(c) for c in uniq[k]), order[bounds[k]:bounds[k + 1]])
            for k in range(len(uniq))]


def reassign_small(blocks: Sequence[RawBlock], spec: BlockSpec) -> list[RawBlock]:
    """Fold blocks under the size threshold into their nearest neighbour block.

    The smallest under-threshold block goes first; its target is the block
    whose cell centre is nearest, preferring blocks that are themselves above
    threshold, ties broken by the lexicographically smallest cell index.
    """
    live = {b.cell_index: b.point_indices for b in blocks}
    thr = spec.threshold
    while len(live) > 1:
        small = [c for c, idx in live.items() if len(idx) < thr]
        if not small:
            break
        victim = min(small, key=lambda c: (len(live[c]), c))
        others = [c for c in live if c != victim]
        big = [c for c in others if len(live[c]) >= thr]
        pool = big or others
        v = np.asarray(victim, dtype=np.float64)
        target = min(pool, key=lambda c: (float(np.sum((np.asarray(c) - v) ** 2)), c))
        live[target] = np.concatenate([live[target], live.pop(victim)])
    return [RawBlock(c, live[c]) for c in sorted(live)]


def block_origin(cloud: LabeledPointCloud, block: RawBlock, spec: BlockSpec) -> np.ndarray:
    return _grid_origin(cloud, spec) + spec.edge * np.asarray(block.cell_index, dtype=np.float64)


def voxel_balance(positions: np.ndarray, block: RawBlock, spec: BlockSpec, seed,
                  origin: np.ndarray | None = None) -> np.ndarray:
    """Top up sparse voxels with copies of their own points.

    Returns the block's indices followed by the added copies.  ``origin`` is
    the block's corner; by default the minimum of its points (voxel counts
    do not depend on it beyond the grid phase).
    """
    idx = np.asarray(block.point_indices)
    pts = positions[idx]
    if origin is None:
        origin = pts.min(axis=0)
    vox = np.floor((pts - origin) / spec.voxel_grid).astype(np.int64)
    _, inverse, counts = np.unique(vox, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    avg = max(1, int(np.floor(counts.mean() + 0.5)))
    deficit = np.maximum(avg - counts, 0)
    if deficit.sum() == 0:
        return idx.copy()
    rng = np.random.default_rng(seed)
    order = np.argsort(inverse, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    which = np.repeat(np.arange(len(counts)), deficit)
    pick = starts[which] + (rng.random(len(which)) * counts[which]).astype(np.int64)
    return np.concatenate([idx, idx[order[pick]]])


def _chunk_groups(balanced: np.ndarray, n: int, rng: np.random.Generator) -> tuple[list[np.ndarray], np.ndarray]:
    """Split a balanced index list into disjoint chunks of whole source-index groups.

    Copies of one source index always land in the same chunk.  Returns the
    chunks (each at most ``n`` long) and the leftover indices.
    """
    uniq, mult = np.unique(balanced, return_counts=True)
    perm = rng.permutation(len(uniq))
    uniq, mult = uniq[perm], mult[perm]
    items = np.repeat(uniq, mult)
    ends = np.cumsum(mult)
    chunks, start_group, start_item = [], 0, 0
    while len(items) - start_item >= n:
        # last group that still fits entirely
        stop = int(np.searchsorted(ends, start_item + n, side="right"))
        if stop == start_group:
            stop = start_group + 1  # a single group larger than n; cannot happen for sane voxel sizes
        end_item = int(ends[stop - 1])
        chunks.append(items[start_item:min(end_item, start_item + n)])
        start_group, start_item = stop, end_item
    return chunks, items[start_item:]


def _pad(idx: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    if len(idx) >= n:
        return idx[:n]
    extra = idx[rng.integers(0, len(idx), size=n - len(idx))]
    return np.concatenate([idx, extra])


def sample_fixed(cloud: LabeledPointCloud, balanced_indices: np.ndarray, spec: BlockSpec, seed,
                 origin: np.ndarray | None = None, keep_remainder: bool = False) -> list[SampledBlock]:
    """Cut a balanced index list into blocks of exactly ``spec.n_points`` rows.

    ``keep_remainder`` pads the leftover subset regardless of its size, which
    inference needs so that every point gets a prediction.
    """
    bal = np.asarray(balanced_indices, dtype=np.int64)
    if len(bal) == 0:
        raise ValueError("sample_fixed needs a non-empty index list")
    n = spec.n_points
    rng = np.random.default_rng(seed)
    if len(bal) >= n:
        chunks, rest = _chunk_groups(bal, n, rng)
        groups = [_pad(c, n, rng) for c in chunks]
        if len(rest) and (keep_remainder or len(rest) >= spec.threshold):
            groups.append(_pad(rest, n, rng))
    else:
        groups = [_pad(bal, n, rng)]
    if origin is None:
        origin = cloud.positions[bal].min(axis=0)
    return [_make_sampled(cloud, g, origin, spec) for g in groups]


def _make_sampled(cloud, idx, origin, spec) -> SampledBlock:
    labels = None if cloud.labels is None else cloud.labels[idx]
    return SampledBlock(cloud.positions[idx], idx, labels, np.asarray(origin, dtype=np.float64),
                        spec.edge, spec.offset)


def _sub_seed(seed, *keys) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *keys])


def blocks_for_offset(cloud: LabeledPointCloud, spec: BlockSpec, seed, keep_remainder: bool = False) -> list[SampledBlock]:
    raw = reassign_small(partition(cloud, spec), spec)
    out = []
    off_key = int(round(spec.offset * 1000))
    for k, b in enumerate(raw):
        origin = block_origin(cloud, b, spec)
        bal = voxel_balance(cloud.positions, b, spec, _sub_seed(seed, off_key, k, 0), origin=origin)
        out += sample_fixed(cloud, bal, spec, _sub_seed(seed, off_key, k, 1), origin=origin,
                            keep_remainder=keep_remainder)
    return out


def make_blocks(cloud: LabeledPointCloud, spec_base: BlockSpec, offsets: Iterable[float] = (0.0, 5.0),
                seed=0, keep_remainder: bool = False) -> list[SampledBlock]:
    offsets = list(offsets)
    if not offsets:
        raise ValueError("make_blocks needs at least one offset")
    blocks = []
    for off in offsets:
        blocks += blocks_for_offset(cloud, replace(spec_base, offset=float(off)), seed, keep_remainder)
    return blocks


def merge_predictions(cloud_size: int, per_block_scores: Iterable[tuple[SampledBlock, np.ndarray]]) -> np.ndarray:
    """Element-wise max of every score row a point received, then argmax (lowest class wins ties)."""
    best = np.full((cloud_size, N_CLASSES), -np.inf)
    for block, scores in per_block_scores:
        scores = np.asarray(scores, dtype=np.float64)
        np.maximum.at(best, block.source_indices, scores)
    missing = np.flatnonzero(~np.isfinite(best[:, 0]))
    if len(missing):
        raise CoverageError(missing)
    return np.argmax(best, axis=1)


# ---------------------------------------------------------------------------
# block archives

ARCHIVE_MAGIC = b"RPBK"
_HEADER = struct.Struct("<4sIddddII?")
RECORD = np.dtype([("xyz", "<f4", (3,)), ("label", "u1"), ("src", "<u4")])
NO_LABEL = 255


def write_archive(path, blocks: Sequence[SampledBlock], spec: BlockSpec) -> None:
    """One file per cloud and offset, little-endian.

    Header: magic, version (u32), edge, offset, min_fraction, voxel_grid (f64),
    n_points, count (u32), has_labels (u8); then ``count`` block origins
    (3 x f64); then ``count * n_points`` packed records of
    (3 x f32 position, u8 label, u32 source index).
    """
    has_labels = bool(blocks) and blocks[0].labels is not None
    with open(Path(path), "wb") as f:
        f.write(_HEADER.pack(ARCHIVE_MAGIC, 1, spec.edge, spec.offset, spec.min_fraction,
                             spec.voxel_grid, spec.n_points, len(blocks), has_labels))
        for b in blocks:
            f.write(np.asarray(b.block_origin, dtype="<f8").tobytes())
        for b in blocks:
            rec = np.empty(spec.n_points, dtype=RECORD)
            rec["xyz"] = b.positions
            rec["label"] = NO_LABEL if b.labels is None else b.labels
            rec["src"] = b.source_indices
            f.write(rec.tobytes())


def read_archive(path) -> tuple[BlockSpec, list[SampledBlock]]:
    blob = Path(path).read_bytes()
    magic, _, edge, offset, min_fraction, voxel_grid, n_points, count, has_labels = _HEADER.unpack_from(blob)
    if magic != ARCHIVE_MAGIC:
        raise ValueError(f"{path}: not a block archive")
    pos = _HEADER.size
    origins = np.frombuffer(blob, dtype="<f8", count=3 * count, offset=pos).reshape(count, 3)
    pos += 24 * count
    recs = np.frombuffer(blob, dtype=RECORD, count=count * n_points, offset=pos).reshape(count, n_points)
    spec = BlockSpec(edge, offset, n_points, min_fraction, voxel_grid)
    blocks = [SampledBlock(r["xyz"].astype(np.float64), r["src"].astype(np.int64),
                           r["label"].astype(np.int64) if has_labels else None,
                           origins[k].copy(), edge, offset)
              for k, r in enumerate(recs)]
    return spec, blocks
