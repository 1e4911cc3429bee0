"""The six segmentation architectures, model construction and checkpoints."""
from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..preprocess import SampledBlock
from . import pointops as geo
from .layers import (BlockFeatures, Ctx, dense, edge_conv, feature_propagation, mlp, ri_conv,
                     set_abstraction, shell_conv, x_conv)
from .spec import Architecture, ModelSpec


class CompatibilityError(ValueError):
    """Weights that do not fit a spec; ``offending`` lists the tensor names."""

    def __init__(self, message: str, offending=()):
        super().__init__(message)
        self.offending = list(offending)


def _head(ctx: Ctx, spec: ModelSpec, h: Tensor) -> Tensor:
    rec = spec.layer("head")
    h = mlp(ctx, "head", h, rec.channels)
    return dense(ctx, "head.out", h, spec.n_classes, bn=False, act=False)


def _pointnet(ctx, spec, pos, geom):
    x = Tensor(pos)
    if spec.use_tnet:
        t = ad.reduce_max(mlp(ctx, "tnet", x, (16, 32)), axis=1)
        T = dense(ctx, "tnet.out", t, 9, bn=False, act=False, bias_init=np.eye(3).ravel())
        x = ad.matmul(x, ad.reshape(T, (pos.shape[0], 3, 3)))
    local = []
    for rec in spec.of_kind("point_mlp"):
        x = mlp(ctx, rec.name, x, rec.channels)
        local.append(x)
    g = ad.reduce_max(x, axis=1)
    for rec in spec.of_kind("global_fc"):
        for i, c in enumerate(rec.channels):
            g = dense(ctx, f"{rec.name}.{i}", g, c, bn=False)
    B, n = pos.shape[:2]
    g = ad.broadcast_to(ad.reshape(g, (B, 1, g.shape[-1])), (B, n, g.shape[-1]))
    return _head(ctx, spec, ad.concat(local[:-1] + [g], axis=-1))


def _pointnetpp(ctx, spec, pos, geom):
    levels = [BlockFeatures(pos, Tensor(pos))]
    for i, rec in enumerate(spec.of_kind("sa")):
        levels.append(set_abstraction(ctx, rec.name, levels[-1], rec.channels, rec.P, rec.R, rec.M,
                                      geom=geom, seed=i))
    cur = levels[-1]
    for i, rec in enumerate(spec.of_kind("fp")):
        fine = levels[-2 - i]
        cur = feature_propagation(ctx, rec.name, cur, fine.positions, fine.features, rec.channels, geom=geom)
    return _head(ctx, spec, cur.features)


def _dgcnn(ctx, spec, pos, geom):
    x = Tensor(pos)
    outs = []
    for i, rec in enumerate(spec.of_kind("edgeconv")):
        key = f"{rec.name}.idx"
        if i == 0 and key not in geom:
            # first graph lives in coordinate space and can be cached
            geom[key] = geo.knn(pos, pos, rec.K)
        # later graphs are rebuilt from the current features unless pinned by the caller
        idx = geom.get(key)
        if idx is None:
            idx = geom[f"{rec.name}.dynamic"] = geo.knn(x.data, x.data, rec.K)
        x = edge_conv(ctx, rec.name, x, rec.K, rec.channels, idx=idx)
        outs.append(x)
    cat = ad.concat(outs, axis=-1)
    emb = spec.layer("embed")
    g = ad.reduce_max(mlp(ctx, emb.name, cat, emb.channels), axis=1)
    B, n = pos.shape[:2]
    g = ad.broadcast_to(ad.reshape(g, (B, 1, g.shape[-1])), (B, n, g.shape[-1]))
    return _head(ctx, spec, ad.concat([g] + outs, axis=-1))


def _encoder_decoder(ctx, spec, pos, geom, down_kind, up_kind, conv):
    levels = [BlockFeatures(pos, None)]
    for rec in spec.of_kind(down_kind):
        levels.append(conv(ctx, rec.name, levels[-1], rec.channels[0], rec.K, rec.D, P=rec.P,
                           lift=rec.lift or 8, geom=geom))
    cur = levels[-1]
    for i, rec in enumerate(spec.of_kind(up_kind)):
        fine = levels[-2 - i]
        up = conv(ctx, rec.name, cur, rec.channels[0], rec.K, rec.D, lift=rec.lift or 8,
                  queries=fine.positions, geom=geom)
        h = dense(ctx, f"{rec.name}.fuse", ad.concat([up.features, fine.features], axis=-1), rec.channels[0])
        cur = BlockFeatures(fine.positions, h)
    return _head(ctx, spec, cur.features)


def _pointcnn(ctx, spec, pos, geom):
    return _encoder_decoder(ctx, spec, pos, geom, "xconv", "xdeconv", x_conv)


def _shellnet(ctx, spec, pos, geom):
    return _encoder_decoder(ctx, spec, pos, geom, "shellconv", "shellup", shell_conv)


def _riconv(ctx, spec, pos, geom):
    levels = [BlockFeatures(pos, None)]
    for rec in spec.of_kind("riconv"):
        levels.append(ri_conv(ctx, rec.name, levels[-1], rec.channels[0], rec.K, rec.D, rec.P,
                              lift=rec.lift or 8, geom=geom))
    cur = levels[-1]
    # the decoder uses distances only, so invariance is preserved
    for i, rec in enumerate(spec.of_kind("fp")):
        fine = levels[-2 - i]
        cur = feature_propagation(ctx, rec.name, cur, fine.positions, fine.features, rec.channels, geom=geom)
    return _head(ctx, spec, cur.features)


_BUILDERS = {
    Architecture.POINTNET: _pointnet,
    Architecture.POINTNETPP: _pointnetpp,
    Architecture.DGCNN: _dgcnn,
    Architecture.POINTCNN: _pointcnn,
    Architecture.SHELLNET: _shellnet,
    Architecture.RICONV: _riconv,
}


def network(ctx: Ctx, spec: ModelSpec, positions: np.ndarray, geom: dict | None = None) -> Tensor:
    """Logits (B, n, n_classes) for block-centred positions (B, n, 3)."""
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim == 2:
        pos = pos[None]
    if pos.shape[1:] != (spec.n_points, 3):
        raise ad.ShapeError(f"model expects blocks of {spec.n_points} points, got {pos.shape[1]}")
    return _BUILDERS[spec.architecture](ctx, spec, pos, {} if geom is None else geom)


def geometry(spec: ModelSpec, positions: np.ndarray) -> dict:
    """Weight-independent neighbourhood indices for a batch, reusable across epochs."""
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim == 2:
        pos = pos[None]
    geom: dict = {}
    # a throwaway forward fills the cache; parameters are irrelevant here
    ctx = Ctx({}, {}, rng=np.random.default_rng(0), update_stats=False)
    network(ctx, spec, pos, geom)
    return {k: v for k, v in geom.items() if not k.endswith(".dynamic")}


def stack_geometry(parts) -> dict:
    parts = list(parts)
    return {k: np.concatenate([p[k] for p in parts], axis=0) for k in parts[0]}


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: dict
    buffers: dict
    provenance: dict = field(default_factory=dict)
    optimizer: ad.OptimizerState | None = None  # state after the last epoch, if trained

    @property
    def weights(self) -> dict:
        return {**self.params, **self.buffers}

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.spec, {k: v.copy() for k, v in self.params.items()},
                          {k: v.copy() for k, v in self.buffers.items()}, dict(self.provenance), self.optimizer)

    def save(self, path) -> None:
        tensors = {f"param/{k}": v for k, v in self.params.items()}
        tensors.update({f"buffer/{k}": v for k, v in self.buffers.items()})
        meta = {"spec": self.spec.to_dict(), "provenance": self.provenance}
        opt = self.optimizer
        if opt is not None:
            tensors.update({f"adam_m/{k}": v for k, v in opt.m.items()})
            tensors.update({f"adam_v/{k}": v for k, v in opt.v.items()})
            meta["optimizer"] = {**opt.hyperparameters(), "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
                                 "step": opt.step, "samples_seen": opt.samples_seen}
        ad.write_container(path, tensors, meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        tensors, meta = ad.read_container(path)
        spec = ModelSpec.from_dict(meta["spec"])

        def section(prefix):
            return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

        opt = None
        if "optimizer" in meta:
            opt = ad.OptimizerState(**meta["optimizer"], m=section("adam_m/"), v=section("adam_v/"))
        ck = cls(spec, section("param/"), section("buffer/"), meta.get("provenance", {}), opt)
        check_compatible(ck, spec)
        return ck


def build_model(spec: ModelSpec, seed: int = 0, provenance: dict | None = None) -> Checkpoint:
    """Freshly initialised weights; Kaiming-uniform, seeded, identical for equal (spec, seed)."""
    params, buffers = {}, {}
    ctx = Ctx(params, buffers, rng=np.random.default_rng(seed), update_stats=False)
    network(ctx, spec, np.zeros((1, spec.n_points, 3)))
    prov = {"tag": None, "epochs": 0, "seed": int(seed)}
    prov.update(provenance or {})
    return Checkpoint(spec, params, buffers, prov)


def check_compatible(ck: Checkpoint, spec: ModelSpec | None = None) -> None:
    """Raise CompatibilityError unless the checkpoint's tensors match ``spec`` by name and shape."""
    spec = spec or ck.spec
    ref = build_model(spec, 0)
    bad = []
    for want, have in ((ref.params, ck.params), (ref.buffers, ck.buffers)):
        for k in sorted(set(want) | set(have)):
            if k not in want or k not in have or want[k].shape != have[k].shape:
                bad.append(k)
    if bad:
        raise CompatibilityError(f"{len(bad)} tensors do not match the {spec.architecture.value} spec: "
                                 + ", ".join(bad[:10]), bad)


def logits(ck: Checkpoint, positions: np.ndarray, geom: dict | None = None) -> np.ndarray:
    ctx = Ctx(ck.params, ck.buffers, training=False)
    return network(ctx, ck.spec, positions, geom).data


def predict(ck: Checkpoint, positions: np.ndarray, geom: dict | None = None) -> np.ndarray:
    """Softmax class scores (B, n, n_classes) in evaluation mode."""
    z = logits(ck, positions, geom)
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def forward(ck: Checkpoint, block: SampledBlock) -> np.ndarray:
    """Per-point class scores (n_points, n_classes) for one block; rows sum to one."""
    if len(block.positions) != ck.spec.n_points:
        raise ad.ShapeError(f"model expects {ck.spec.n_points} points, block has {len(block.positions)}")
    return predict(ck, block.centered()[None])[0]
