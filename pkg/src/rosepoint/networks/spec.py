"""Declarative architecture descriptions.

Channel widths of the modified networks are not published, so every plan
below is a declared default: ``scale="full"`` is the full-sized guess at
4096 points, ``scale="desk"`` divides all widths by four and runs on 512
points, ``scale="toy"`` is the tiny configuration used for gradient checks.
Sampled-point counts P are stored as absolute numbers, derived from
fractions of the block size.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import tomli
import tomli_w


class SpecError(ValueError):
    pass


class Architecture(str, enum.Enum):
    POINTNET = "PointNet"
    POINTNETPP = "PointNetPP"
    DGCNN = "DGCNN"
    POINTCNN = "PointCNN"
    SHELLNET = "ShellNet"
    RICONV = "RIConv"


@dataclass(frozen=True)
class LayerRecord:
    name: str
    kind: str
    channels: tuple[int, ...]
    P: int | None = None  # sampled representatives
    R: float | None = None  # ball radius, cm
    M: int | None = None  # group size
    K: int | None = None  # neighbours
    D: int | None = None  # dilation / shells / bins
    lift: int | None = None  # width of the coordinate-lifting MLP

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if v is not None}
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerRecord":
        d = dict(d)
        d["channels"] = tuple(int(c) for c in d.get("channels", ()))
        return cls(**d)


@dataclass(frozen=True)
class ModelSpec:
    architecture: Architecture
    layers: tuple[LayerRecord, ...]
    n_points: int = 512
    n_classes: int = 3
    use_tnet: bool = False
    scale: str = "desk"

    def __post_init__(self):
        object.__setattr__(self, "architecture", Architecture(self.architecture))
        object.__setattr__(self, "layers", tuple(self.layers))
        validate(self)

    def of_kind(self, kind: str) -> list[LayerRecord]:
        return [l for l in self.layers if l.kind == kind]

    def layer(self, name: str) -> LayerRecord:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    # -- text config ---------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "architecture": self.architecture.value,
            "n_points": self.n_points,
            "n_classes": self.n_classes,
            "use_tnet": self.use_tnet,
            "scale": self.scale,
            "layers": [l.to_dict() for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(Architecture(d["architecture"]), tuple(LayerRecord.from_dict(l) for l in d["layers"]),
                   int(d.get("n_points", 512)), int(d.get("n_classes", 3)), bool(d.get("use_tnet", False)),
                   d.get("scale", "custom"))

    def to_toml(self) -> str:
        return tomli_w.dumps({"model": self.to_dict()})

    @classmethod
    def from_toml(cls, text: str) -> "ModelSpec":
        return cls.from_dict(tomli.loads(text)["model"])

    def save(self, path) -> None:
        Path(path).write_text(self.to_toml())

    @classmethod
    def load(cls, path) -> "ModelSpec":
        return cls.from_toml(Path(path).read_text())


_ARITY = {
    # kind -> (min, max) count; None = unbounded
    Architecture.POINTNET: {"point_mlp": (2, None), "global_fc": (1, None), "head": (1, 1)},
    Architecture.POINTNETPP: {"sa": (5, 5), "fp": (5, 5), "head": (1, 1)},
    Architecture.DGCNN: {"edgeconv": (1, None), "embed": (1, 1), "head": (1, 1)},
    Architecture.POINTCNN: {"xconv": (2, None), "xdeconv": (1, None), "head": (1, 1)},
    Architecture.SHELLNET: {"shellconv": (2, None), "shellup": (1, None), "head": (1, 1)},
    Architecture.RICONV: {"riconv": (2, None), "fp": (1, None), "head": (1, 1)},
}

_REQUIRED = {
    "sa": ("P", "R", "M"),
    "edgeconv": ("K",),
    "xconv": ("P", "K", "D"),
    "xdeconv": ("K", "D"),
    "shellconv": ("P", "K", "D"),
    "shellup": ("K", "D"),
    "riconv": ("P", "K", "D"),
}


def validate(spec: ModelSpec) -> None:
    arity = _ARITY[spec.architecture]
    names = [l.name for l in spec.layers]
    if len(set(names)) != len(names):
        raise SpecError("layer names must be unique")
    for l in spec.layers:
        if l.kind not in arity:
            raise SpecError(f"{spec.architecture.value}: unexpected layer kind {l.kind!r}")
        if not l.channels or min(l.channels) < 1:
            raise SpecError(f"layer {l.name}: channels must be positive")
        for attr in _REQUIRED.get(l.kind, ()):
            v = getattr(l, attr)
            if v is None or v <= 0:
                raise SpecError(f"layer {l.name}: {attr} must be positive")
    for kind, (lo, hi) in arity.items():
        n = len(spec.of_kind(kind))
        if n < lo or (hi is not None and n > hi):
            want = str(lo) if lo == hi else f">= {lo}" if hi is None else f"{lo}..{hi}"
            raise SpecError(f"{spec.architecture.value} needs {want} {kind!r} layers, got {n}")
    if spec.n_classes < 1 or spec.n_points < 1:
        raise SpecError("n_points and n_classes must be positive")
    enc = {Architecture.POINTCNN: ("xconv", "xdeconv"), Architecture.SHELLNET: ("shellconv", "shellup"),
           Architecture.RICONV: ("riconv", "fp")}.get(spec.architecture)
    if enc:
        down, up = spec.of_kind(enc[0]), spec.of_kind(enc[1])
        if len(up) != len(down) - 1:
            raise SpecError(f"{spec.architecture.value}: {len(down)} encoder layers need {len(down) - 1} decoder layers")
        sizes = [spec.n_points] + [l.P for l in down]
        if down[0].P != spec.n_points:
            raise SpecError(f"{spec.architecture.value}: first encoder layer must keep all {spec.n_points} points")
        if any(b > a for a, b in zip(sizes, sizes[1:])):
            raise SpecError("encoder point counts must not increase")
    if spec.architecture is Architecture.POINTNETPP:
        P = [l.P for l in spec.of_kind("sa")]
        if P[0] > spec.n_points or any(b > a for a, b in zip(P, P[1:])):
            raise SpecError("SA point counts must not increase")


# ---------------------------------------------------------------------------
# default plans

_DIVISOR = {"full": 1, "desk": 4, "toy": None}
_NPOINTS = {"full": 4096, "desk": 512, "toy": 32}


def _w(ch, scale):
    if scale == "toy":
        return tuple(min(8, max(2, c // 32)) for c in ch)
    return tuple(max(4, c // _DIVISOR[scale]) for c in ch)


def default_spec(architecture, scale: str = "desk", n_points: int | None = None) -> ModelSpec:
    arch = Architecture(architecture)
    if scale not in _DIVISOR:
        raise SpecError(f"unknown scale {scale!r}")
    n = n_points or _NPOINTS[scale]
    toy = scale == "toy"

    def P(frac):
        return max(1, int(n * frac))

    L = LayerRecord
    if arch is Architecture.POINTNET:
        layers = [L(f"point{i}", "point_mlp", _w((c,), scale)) for i, c in enumerate((64, 128, 128, 512, 1024), 1)]
        layers += [L("global_fc", "global_fc", _w((256, 128), scale)),
                   L("head", "head", _w((512, 256, 128, 128), scale))]
    elif arch is Architecture.POINTNETPP:
        sa_ch = [(32, 32, 64), (64, 64, 128), (128, 128, 256), (256, 256, 512), (256, 256, 512)]
        fp_ch = [(256, 256), (256, 256), (256, 128), (128, 128), (128, 128, 128)]
        radii = (1.0, 2.0, 4.0, 6.0, 8.0)
        fracs = (1 / 2, 1 / 4, 1 / 8, 1 / 16, 1 / 32)
        M = {"toy": 4, "desk": 16}.get(scale, 32)  # desk blocks hold 8x fewer points, groups were mostly padding
        layers = [L(f"sa{i + 1}", "sa", _w(sa_ch[i], scale), P=P(fracs[i]), R=radii[i], M=M) for i in range(5)]
        layers += [L(f"fp{i + 1}", "fp", _w(fp_ch[i], scale)) for i in range(5)]
        layers += [L("head", "head", _w((128,), scale))]
    elif arch is Architecture.DGCNN:
        K = 8 if toy else 32
        layers = [L("edge1", "edgeconv", _w((64, 64), scale), K=K),
                  L("edge2", "edgeconv", _w((64, 64), scale), K=K),
                  L("embed", "embed", _w((1024,), scale)),
                  L("head", "head", _w((256, 256, 128), scale))]
    elif arch is Architecture.POINTCNN:
        if toy:
            enc = [(1, 4, 1, 64), (1 / 4, 4, 1, 128), (1 / 8, 2, 2, 192)]
            dec = [(2, 1, 128), (4, 1, 64)]
        else:
            enc = [(1, 8, 1, 64), (1 / 4, 12, 2, 128), (1 / 8, 16, 2, 192), (1 / 16, 16, 3, 256)]
            dec = [(16, 2, 192), (16, 2, 128), (12, 2, 64)]
        layers = [L(f"xconv{i + 1}", "xconv", _w((c,), scale), P=P(f), K=k, D=d,
                    lift=_w((max(c // 4, 16),), scale)[0]) for i, (f, k, d, c) in enumerate(enc)]
        layers += [L(f"xdeconv{i + 1}", "xdeconv", _w((c,), scale), K=k, D=d,
                     lift=_w((max(c // 4, 16),), scale)[0]) for i, (k, d, c) in enumerate(dec)]
        layers += [L("head", "head", _w((256, 128, 128), scale))]
    elif arch is Architecture.SHELLNET:
        if toy:
            enc = [(1, 2, 2, 64), (1 / 4, 2, 2, 128), (1 / 8, 2, 2, 256)]
            dec = [(2, 1, 128), (2, 2, 64)]
        else:
            enc = [(1, 8, 2, 64), (1 / 4, 16, 2, 128), (1 / 16, 16, 2, 256)]
            dec = [(8, 2, 128), (8, 2, 64)]
        layers = [L(f"shell{i + 1}", "shellconv", _w((c,), scale), P=P(f), K=k, D=d,
                    lift=_w((max(c // 4, 16),), scale)[0]) for i, (f, k, d, c) in enumerate(enc)]
        layers += [L(f"shellup{i + 1}", "shellup", _w((c,), scale), K=k, D=d,
                     lift=_w((max(c // 4, 16),), scale)[0]) for i, (k, d, c) in enumerate(dec)]
        layers += [L("head", "head", _w((128, 128, 64), scale))]
    else:
        if toy:
            enc = [(1, 4, 2, 64), (1 / 4, 4, 2, 128), (1 / 8, 4, 2, 256)]
        else:
            enc = [(1, 16, 2, 64), (1 / 4, 16, 2, 128), (1 / 16, 16, 2, 256)]
        layers = [L(f"ri{i + 1}", "riconv", _w((c,), scale), P=P(f), K=k, D=d,
                    lift=_w((max(c // 4, 16),), scale)[0]) for i, (f, k, d, c) in enumerate(enc)]
        layers += [L("fp1", "fp", _w((128,), scale)), L("fp2", "fp", _w((64,), scale))]
        layers += [L("head", "head", _w((64, 64), scale))]
    return ModelSpec(arch, tuple(layers), n_points=n, scale=scale)


def with_layer(spec: ModelSpec, name: str, **changes) -> ModelSpec:
    layers = tuple(replace(l, **changes) if l.name == name else l for l in spec.layers)
    return replace(spec, layers=layers)


ALL_ARCHITECTURES = tuple(Architecture)
