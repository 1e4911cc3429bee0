"""Parameter handling and the point-set operators.

A :class:`Ctx` hands out parameters by name.  While a model is being built
the context creates missing parameters on first use (Kaiming-uniform weights,
zero biases), so the parameter set is defined by the forward code itself and
call order fixes the initialisation stream.

Operators take batched numpy positions (B, n, 3) and feature tensors
(B, n, C) or ``None`` for positions-only input.
"""
from __future__ import annotations

import fnmatch
from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from . import pointops as geo


@dataclass
class Ctx:
    params: dict
    buffers: dict
    training: bool = False
    frozen: tuple = ()  # fnmatch patterns over parameter names
    rng: np.random.Generator | None = None  # set only while building
    update_stats: bool = True
    grad: bool = False  # wrap trainable parameters as leaves
    leaves: dict = field(default_factory=dict)

    def is_frozen(self, name: str) -> bool:
        return any(fnmatch.fnmatchcase(name, p) for p in self.frozen)

    def _create(self, name, shape, fan_in, kind, init):
        if self.rng is None:
            raise KeyError(f"missing parameter {name!r}")
        if init is not None:
            return np.array(init, dtype=np.float64).reshape(shape)
        if kind == "weight":
            bound = np.sqrt(6.0 / fan_in)
            return self.rng.uniform(-bound, bound, size=shape)
        if kind == "one":
            return np.ones(shape)
        return np.zeros(shape)

    def param(self, name: str, shape: tuple, fan_in: int = 1, kind: str = "weight", init=None) -> Tensor:
        if name not in self.params:
            self.params[name] = self._create(name, shape, fan_in, kind, init)
        arr = self.params[name]
        if arr.shape != tuple(shape):
            raise ad.ShapeError(f"parameter {name!r} has shape {arr.shape}, layer expects {tuple(shape)}")
        if name in self.leaves:
            return self.leaves[name]
        t = Tensor(arr, requires_grad=self.grad and not self.is_frozen(name), name=name)
        self.leaves[name] = t
        return t

    def buffer(self, name: str, init) -> np.ndarray:
        if name not in self.buffers:
            if self.rng is None:
                raise KeyError(f"missing buffer {name!r}")
            self.buffers[name] = np.array(init, dtype=np.float64)
        return self.buffers[name]

    def gradients(self) -> dict:
        return {n: t.grad for n, t in self.leaves.items() if t.requires_grad and t.grad is not None}


def dense(ctx: Ctx, name: str, x: Tensor, cout: int, bn: bool = True, act: bool = True,
          bias_init: np.ndarray | None = None) -> Tensor:
    """Shared fully connected layer over the last axis, optionally with batch norm and ReLU."""
    cin = x.shape[-1]
    W = ctx.param(f"{name}.W", (cin, cout), fan_in=cin)
    if bn:
        y = ad.matmul(x, W)
        gamma = ctx.param(f"{name}.gamma", (cout,), kind="one")
        beta = ctx.param(f"{name}.beta", (cout,), kind="zero")
        rm = ctx.buffer(f"{name}.mean", np.zeros(cout))
        rv = ctx.buffer(f"{name}.var", np.ones(cout))
        frozen = ctx.is_frozen(f"{name}.W")
        train = ctx.training and not frozen
        keep = train and not ctx.update_stats  # batch statistics without touching the buffers
        y = ad.batch_norm(y, gamma, beta, None if keep else rm, None if keep else rv, training=train)
    else:
        b = ctx.param(f"{name}.b", (cout,), kind="zero", init=bias_init)
        y = ad.linear(x, W, b)
    return ad.relu(y) if act else y


def mlp(ctx: Ctx, name: str, x: Tensor, channels, bn: bool = True) -> Tensor:
    for i, c in enumerate(channels):
        x = dense(ctx, f"{name}.{i}", x, c, bn=bn)
    return x


def _take(pos: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Batched row gather for plain arrays: pos (B, n, d), idx (B, ...)."""
    B = pos.shape[0]
    return pos[np.arange(B).reshape((B,) + (1,) * (idx.ndim - 1)), idx]


def _group(x: Tensor | None, idx: np.ndarray, rel: np.ndarray, lifted: Tensor | None = None) -> Tensor:
    """Concatenate relative coordinates (or their lifted version) with gathered features."""
    parts = [lifted if lifted is not None else Tensor(rel)]
    if x is not None:
        parts.append(ad.gather(x, idx))
    return parts[0] if len(parts) == 1 else ad.concat(parts, axis=-1)


@dataclass
class BlockFeatures:
    """Batched positions (B, n, 3) with feature rows (B, n, C); ``features=None`` means C = 0."""
    positions: np.ndarray
    features: Tensor | None

    def __post_init__(self):
        if self.features is not None and self.features.shape[:2] != self.positions.shape[:2]:
            raise ad.ShapeError(f"positions {self.positions.shape} and features {self.features.shape} disagree")

    @property
    def channels(self) -> int:
        return 0 if self.features is None else self.features.shape[-1]


def representatives(positions: np.ndarray, P: int, start: int = 0) -> np.ndarray:
    """FPS indices, or every index when P equals the row count."""
    B, n, _ = positions.shape
    if P == n:
        return np.broadcast_to(np.arange(n), (B, n)).copy()
    return geo.farthest_point_sampling(positions, P, start)


# ---------------------------------------------------------------------------
# operators

def set_abstraction(ctx: Ctx, name: str, block: BlockFeatures, channels, P: int, R: float, M: int,
                    geom: dict | None = None, seed=0) -> BlockFeatures:
    """Sample P representatives, group within radius R, run a shared MLP and max-pool each group."""
    pos = block.positions
    if P > pos.shape[1]:
        raise ad.ShapeError(f"{name}: P={P} exceeds {pos.shape[1]} rows")
    geom = {} if geom is None else geom
    if f"{name}.fps" not in geom:
        fps = geo.farthest_point_sampling(pos, P)
        geom[f"{name}.fps"] = fps
        geom[f"{name}.group"] = geo.ball_query(pos, _take(pos, fps), R, M, seed=seed, center_index=fps)
    fps, grp = geom[f"{name}.fps"], geom[f"{name}.group"]
    centers = _take(pos, fps)
    rel = _take(pos, grp) - centers[:, :, None, :]
    h = mlp(ctx, name, _group(block.features, grp, rel), channels)
    return BlockFeatures(centers, ad.reduce_max(h, axis=2))


def interpolate(coarse: Tensor, idx: np.ndarray, w: np.ndarray) -> Tensor:
    """Weighted sum of gathered coarse rows: idx, w are (B, n_fine, k)."""
    g = ad.gather(coarse, idx)
    return ad.reduce_sum(ad.mul(g, Tensor(w[..., None])), axis=2)


def feature_propagation(ctx: Ctx, name: str, coarse: BlockFeatures, fine_positions: np.ndarray,
                        skip: Tensor | None, channels, geom: dict | None = None) -> BlockFeatures:
    """Inverse-squared-distance interpolation from the 3 nearest coarse points, skip concat, shared MLP."""
    geom = {} if geom is None else geom
    if f"{name}.idx" not in geom:
        geom[f"{name}.idx"], geom[f"{name}.w"] = geo.interpolation_weights(fine_positions, coarse.positions, 3)
    h = interpolate(coarse.features, geom[f"{name}.idx"], geom[f"{name}.w"])
    if skip is not None:
        h = ad.concat([h, skip], axis=-1)
    return BlockFeatures(fine_positions, mlp(ctx, name, h, channels))


def edge_conv(ctx: Ctx, name: str, x: Tensor, K: int, channels, graph_rows: np.ndarray | None = None,
              idx: np.ndarray | None = None) -> Tensor:
    """EdgeConv: concat(x_i, x_j - x_i) over the K nearest rows, shared MLP, max over edges.

    The graph is built on ``graph_rows`` (defaults to the current features,
    which makes it dynamic) unless ``idx`` is supplied.
    """
    if idx is None:
        rows = x.data if graph_rows is None else graph_rows
        idx = geo.knn(rows, rows, K)
    B, n, C = x.shape
    xj = ad.gather(x, idx)
    xi = ad.broadcast_to(ad.reshape(x, (B, n, 1, C)), (B, n, idx.shape[-1], C))
    e = ad.concat([xi, ad.sub(xj, xi)], axis=-1)
    return ad.reduce_max(mlp(ctx, name, e, channels), axis=2)


def x_conv(ctx: Ctx, name: str, block: BlockFeatures, cout: int, K: int, D: int, P: int | None = None,
           lift: int = 8, queries: np.ndarray | None = None, geom: dict | None = None) -> BlockFeatures:
    """X-Conv: lift local coordinates, predict a K x K transform, apply it and convolve.

    Representatives are ``queries`` when given (decoder use), else P points by FPS.
    """
    pos = block.positions
    geom = {} if geom is None else geom
    if f"{name}.nbr" not in geom:
        reps = queries if queries is not None else _take(pos, representatives(pos, P))
        if K * D > pos.shape[1]:
            raise ad.ShapeError(f"{name}: K*D={K * D} exceeds {pos.shape[1]} rows")
        geom[f"{name}.reps"] = reps
        geom[f"{name}.nbr"] = geo.dilated_knn(reps, pos, K, D)
    reps, nbr = geom[f"{name}.reps"], geom[f"{name}.nbr"]
    B, Pq = nbr.shape[:2]
    rel = _take(pos, nbr) - reps[:, :, None, :]
    loc = Tensor(rel)
    lifted = mlp(ctx, f"{name}.lift", loc, (lift, lift))
    feats = _group(block.features, nbr, rel, lifted)
    flat = ad.reshape(loc, (B, Pq, K * 3))
    h = dense(ctx, f"{name}.x0", flat, K * K)
    h = dense(ctx, f"{name}.x1", h, K * K)
    X = dense(ctx, f"{name}.x2", h, K * K, bn=False, act=False, bias_init=np.eye(K).ravel())
    X = ad.reshape(X, (B, Pq, K, K))
    fx = ad.matmul(X, feats)
    out = dense(ctx, f"{name}.conv", ad.reshape(fx, (B, Pq, K * feats.shape[-1])), cout)
    return BlockFeatures(reps, out)


def shell_conv(ctx: Ctx, name: str, block: BlockFeatures, cout: int, K: int, D: int, P: int | None = None,
               lift: int = 8, queries: np.ndarray | None = None, geom: dict | None = None) -> BlockFeatures:
    """ShellConv: D*K nearest points split into D distance shells of K, max-pooled per shell,
    then a dense layer across the ordered shells (inner to outer)."""
    pos = block.positions
    geom = {} if geom is None else geom
    if f"{name}.nbr" not in geom:
        reps = queries if queries is not None else _take(pos, representatives(pos, P))
        if K * D > pos.shape[1]:
            raise ad.ShapeError(f"{name}: D*K={K * D} exceeds {pos.shape[1]} rows")
        geom[f"{name}.reps"] = reps
        geom[f"{name}.nbr"] = geo.knn(reps, pos, K * D)
    reps, nbr = geom[f"{name}.reps"], geom[f"{name}.nbr"]
    B, Pq = nbr.shape[:2]
    rel = _take(pos, nbr) - reps[:, :, None, :]
    lifted = mlp(ctx, f"{name}.lift", Tensor(rel), (lift,))
    h = mlp(ctx, f"{name}.point", _group(block.features, nbr, rel, lifted), (max(cout // 2, 1),))
    c = h.shape[-1]
    shells = ad.reduce_max(ad.reshape(h, (B, Pq, D, K, c)), axis=3)
    out = dense(ctx, f"{name}.conv", ad.reshape(shells, (B, Pq, D * c)), cout)
    return BlockFeatures(reps, out)


def ri_conv(ctx: Ctx, name: str, block: BlockFeatures, cout: int, K: int, D: int, P: int,
            lift: int = 8, geom: dict | None = None) -> BlockFeatures:
    """Convolution on rotation-invariant distance/angle features, binned along the reference axis."""
    pos = block.positions
    geom = {} if geom is None else geom
    if f"{name}.nbr" not in geom:
        if K > pos.shape[1]:
            raise ad.ShapeError(f"{name}: K={K} exceeds {pos.shape[1]} rows")
        reps = _take(pos, representatives(pos, P))
        nbr = geo.knn(reps, pos, K)
        feats, order = geo.ri_features(_take(pos, nbr), reps, bins=D)
        geom[f"{name}.reps"] = reps
        geom[f"{name}.nbr"] = np.take_along_axis(nbr, order, axis=-1)
        geom[f"{name}.ri"] = np.take_along_axis(feats, order[..., None], axis=-2)
    reps, nbr, ri = geom[f"{name}.reps"], geom[f"{name}.nbr"], geom[f"{name}.ri"]
    B, Pq = nbr.shape[:2]
    lifted = mlp(ctx, f"{name}.lift", Tensor(ri), (lift, lift))
    h = _group(block.features, nbr, ri, lifted)
    c = h.shape[-1]
    binned = ad.reduce_max(ad.reshape(h, (B, Pq, D, K // D, c)), axis=3)
    out = dense(ctx, f"{name}.conv", ad.reshape(binned, (B, Pq, D * c)), cout)
    return BlockFeatures(reps, out)
