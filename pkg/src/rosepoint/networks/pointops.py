"""Index-producing geometry: sampling, grouping, neighbourhoods and invariant features.

Everything here is plain numpy and not differentiated; the networks only
back-propagate through features gathered with these indices.
"""
from __future__ import annotations

import numpy as np


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared distances between the rows of ``a`` (..., n, d) and ``b`` (..., m, d)."""
    d = (a * a).sum(-1)[..., :, None] + (b * b).sum(-1)[..., None, :] - 2.0 * a @ np.swapaxes(b, -1, -2)
    return np.maximum(d, 0.0)


def farthest_point_sampling(positions: np.ndarray, P: int, start: int = 0) -> np.ndarray:
    """Greedy farthest-first traversal; ``positions`` is (n, 3) or batched (B, n, 3)."""
    pos = np.asarray(positions, dtype=np.float64)
    batched = pos.ndim == 3
    if not batched:
        pos = pos[None]
    B, n, _ = pos.shape
    if not 1 <= P <= n:
        raise ValueError(f"P={P} outside [1, {n}]")
    if not 0 <= start < n:
        raise ValueError(f"start index {start} outside [0, {n})")
    out = np.empty((B, P), dtype=np.int64)
    out[:, 0] = start
    rows = np.arange(B)
    mind = ((pos - pos[:, start:start + 1]) ** 2).sum(-1)
    for k in range(1, P):
        nxt = np.argmax(mind, axis=1)
        out[:, k] = nxt
        d = ((pos - pos[rows, nxt][:, None]) ** 2).sum(-1)
        np.minimum(mind, d, out=mind)
    return out if batched else out[0]


def knn(query_rows: np.ndarray, base_rows: np.ndarray, K: int, exclude_self: bool = False) -> np.ndarray:
    """Indices of the K nearest base rows per query row, nearest first, ties to the lower index.

    Works for positions or feature rows; batched inputs (B, q, d) / (B, n, d)
    are supported.  ``exclude_self`` drops base row i for query row i (query
    and base must then be the same set).
    """
    q = np.asarray(query_rows, dtype=np.float64)
    b = np.asarray(base_rows, dtype=np.float64)
    n = b.shape[-2]
    avail = n - 1 if exclude_self else n
    if not 1 <= K <= avail:
        raise ValueError(f"K={K} outside [1, {avail}]")
    d = _sqdist(q, b)
    if exclude_self:
        if q.shape[-2] != n:
            raise ValueError("exclude_self needs query rows identical to base rows")
        i = np.arange(n)
        d[..., i, i] = np.inf
    if 4 * K >= n:
        return np.argsort(d, axis=-1, kind="stable")[..., :K]
    # partial selection, then an index-stable sort of the survivors
    part = np.argpartition(d, K - 1, axis=-1)[..., :K]
    dk = np.take_along_axis(d, part, axis=-1)
    kth = dk.max(-1, keepdims=True)
    # a tie straddling the cut may have kept a higher index: redo those rows
    clash = (d == kth).sum(-1) != (dk == kth).sum(-1)
    order = np.lexsort((part, dk), axis=-1)
    out = np.take_along_axis(part, order, axis=-1)
    if clash.any():
        out[clash] = np.argsort(d[clash], axis=-1, kind="stable")[..., :K]
    return out


def ball_query(positions: np.ndarray, centers: np.ndarray, R: float, M: int, seed=0,
               center_index: np.ndarray | None = None) -> np.ndarray:
    """Groups of M indices within radius R of each centre.

    Over-full balls are subsampled at random (the centre point is always
    kept when ``center_index`` is given); under-full balls are padded by
    cycling through their members.  Batched (B, n, 3) inputs are supported.
    """
    if R <= 0 or M < 1:
        raise ValueError("ball_query needs R > 0 and M >= 1")
    pos = np.asarray(positions, dtype=np.float64)
    cen = np.asarray(centers, dtype=np.float64)
    batched = pos.ndim == 3
    if not batched:
        pos, cen = pos[None], cen[None]
        if center_index is not None:
            center_index = np.asarray(center_index)[None]
    rng = np.random.default_rng(seed)
    d = _sqdist(cen, pos)
    inside = d <= R * R
    B, P, n = d.shape
    # random keys give a uniform subset; the centre gets the smallest key
    keys = rng.random((B, P, n))
    keys[~inside] = 2.0
    if center_index is not None:
        np.put_along_axis(keys, np.asarray(center_index)[..., None], -1.0, axis=-1)
    else:
        nearest = np.argmin(d, axis=-1)
        np.put_along_axis(keys, nearest[..., None], -1.0, axis=-1)
    take = min(M, n)
    part = np.argpartition(keys, take - 1, axis=-1)[..., :take] if take < n else np.argsort(keys, axis=-1)
    sel_keys = np.take_along_axis(keys, part, axis=-1)
    order = np.argsort(sel_keys, axis=-1, kind="stable")
    part = np.take_along_axis(part, order, axis=-1)
    count = np.minimum(inside.sum(-1), take)  # members per ball, >= 1
    slot = np.arange(M)[None, None, :] % count[..., None]
    if take < M:
        part = np.concatenate([part, np.zeros((B, P, M - take), dtype=part.dtype)], axis=-1)
    out = np.take_along_axis(part, slot, axis=-1)
    return out if batched else out[0]


def dilated_knn(query: np.ndarray, base: np.ndarray, K: int, D: int) -> np.ndarray:
    """Every D-th of the K*D nearest neighbours."""
    return knn(query, base, K * D)[..., ::D]


def interpolation_weights(fine: np.ndarray, coarse: np.ndarray, k: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-squared-distance weights over the k nearest coarse points.

    A fine point that coincides with a coarse point takes that point alone.
    Returns (indices, weights), each (..., n_fine, k).
    """
    fine = np.asarray(fine, dtype=np.float64)
    coarse = np.asarray(coarse, dtype=np.float64)
    k = min(k, coarse.shape[-2])
    idx = knn(fine, coarse, k)
    if coarse.ndim == 2:
        gathered = coarse[idx]
    else:
        gathered = coarse[np.arange(coarse.shape[0])[:, None, None], idx]
    d2 = ((fine[..., :, None, :] - gathered) ** 2).sum(-1)
    hit = d2 <= 1e-20
    w = 1.0 / np.maximum(d2, 1e-20)
    any_hit = hit.any(-1, keepdims=True)
    w = np.where(any_hit, hit.astype(np.float64), w)
    # several exact hits share the weight equally
    w = w / w.sum(-1, keepdims=True)
    return idx, w


def _angle(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Unsigned angle between row vectors, 0 when either is degenerate."""
    cross = np.linalg.norm(np.cross(u, v), axis=-1)
    dot = (u * v).sum(-1)
    ang = np.arctan2(cross, dot)
    degenerate = (np.linalg.norm(u, axis=-1) < 1e-9) | (np.linalg.norm(v, axis=-1) < 1e-9)
    return np.where(degenerate, 0.0, ang)


def ri_features(positions: np.ndarray, representative: np.ndarray, bins: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Rotation-invariant scalars for each neighbour of a group and its bin along the reference axis.

    ``positions`` is (..., K, 3) (the group), ``representative`` (..., 3).
    Per neighbour p with representative r and group centroid c the features
    are (|p - r|, |p - c|, angle(p - r, c - r)).  The reference axis is r->c;
    neighbours are ranked by their projection on it (ties by distance to r,
    then by position in the group) and split into ``bins`` equal bins.
    Returns (features (..., K, 3), bin order (..., K) listing neighbour slots
    from the first bin to the last).
    """
    p = np.asarray(positions, dtype=np.float64)
    r = np.asarray(representative, dtype=np.float64)[..., None, :]
    c = p.mean(axis=-2, keepdims=True)
    pr = p - r
    axis = np.broadcast_to(c - r, p.shape)
    f0 = np.linalg.norm(pr, axis=-1)
    f1 = np.linalg.norm(p - c, axis=-1)
    f2 = _angle(pr, axis)
    feats = np.stack([f0, f1, f2], axis=-1)
    proj = (pr * axis).sum(-1)
    K = p.shape[-2]
    if bins < 1 or K % bins:
        raise ValueError(f"group size {K} is not divisible into {bins} bins")
    # lexsort: last key is primary
    slot = np.broadcast_to(np.arange(K), proj.shape)
    order = np.lexsort((slot, np.round(f0, 9), np.round(proj, 9)), axis=-1)
    return feats, order
