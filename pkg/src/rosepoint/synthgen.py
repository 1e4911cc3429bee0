"""Procedural rosebush meshes from a small stochastic parametric L-system.

The grammar only needs to produce plausible organ geometry with a controllable
class balance; it makes no claim of botanical fidelity.

Modules (symbol, params):

    A(order, remaining, r0, r1)   growing apex
    B(order)                      dormant lateral bud
    I(length, r_start, r_end)     internode (stem)
    L(scale)                      compound leaf: petiole + stipules + leaflets
    K()                           terminal flower
    [ ]                           push / pop turtle state
    +(a) &(a) /(a)                yaw / pitch / roll by a degrees
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import LabeledPointCloud, OrganLabel, merge_organ_codes, save_cloud

SAMPLING_DENSITY = 120.0  # points per cm^2
PHYLLOTAXY = 144.0  # degrees of roll between successive leaves


class GenerationError(RuntimeError):
    pass


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class PlantParams:
    n_axes: int = 3
    axis_morphotype_probs: float = 0.35  # probability that a lateral axis is long
    internode_length_range: tuple[float, float] = (2.2, 3.6)
    branch_radius_range: tuple[float, float] = (0.26, 0.40)
    leaflets_per_leaf: tuple[int, int] = (3, 7)
    flower_prob_per_axis: float = 0.5
    recursion_depth: int = 2
    target_height_range: tuple[float, float] = (30.0, 50.0)
    branch_prob: float = 0.3
    leaflet_length_range: tuple[float, float] = (2.5, 4.2)
    petal_count_range: tuple[int, int] = (8, 15)
    # keeps 120 pts/cm^2 clouds within 150k-300k points
    surface_area_range: tuple[float, float] = (1275.0, 2475.0)

    def __post_init__(self):
        for name in ("internode_length_range", "branch_radius_range", "target_height_range",
                     "leaflet_length_range", "leaflets_per_leaf", "petal_count_range",
                     "surface_area_range"):
            lo, hi = getattr(self, name)
            if not (0 < lo < hi):
                raise ValueError(f"{name} must satisfy 0 < lo < hi, got {(lo, hi)}")
        for name in ("axis_morphotype_probs", "flower_prob_per_axis", "branch_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be a probability, got {p}")
        if self.n_axes < 1:
            raise ValueError("n_axes must be >= 1")
        if self.recursion_depth < 1:
            raise ValueError("recursion_depth must be >= 1")


@dataclass
class OrganMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    organ: OrganLabel


@dataclass
class PlantMesh:
    organs: list[OrganMesh]
    seed: int

    def merged(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All vertices, triangles (global indices) and per-triangle organ codes."""
        verts, tris, organs, base = [], [], [], 0
        for om in self.organs:
            verts.append(om.vertices)
            tris.append(om.triangles + base)
            organs.append(np.full(len(om.triangles), int(om.organ), dtype=np.int64))
            base += len(om.vertices)
        if not verts:
            return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=np.int64)
        return np.concatenate(verts), np.concatenate(tris), np.concatenate(organs)

    def organ_labels(self) -> set[OrganLabel]:
        return {om.organ for om in self.organs if len(om.triangles)}

    def extent(self) -> np.ndarray:
        v, _, _ = self.merged()
        return v.max(axis=0) - v.min(axis=0)


# ---------------------------------------------------------------------------
# geometry helpers


def _rot(axis: np.ndarray, deg: float) -> np.ndarray:
    a = math.radians(deg)
    x, y, z = axis / np.linalg.norm(axis)
    c, s = math.cos(a), math.sin(a)
    C = 1 - c
    return np.array([
        [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
        [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
        [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
    ])


_EX, _EY, _EZ = np.eye(3)


class _Builder:
    """Accumulates triangles per organ."""

    def __init__(self):
        self.parts: dict[OrganLabel, tuple[list, list, int]] = {o: ([], [], 0) for o in OrganLabel}

    def add(self, organ: OrganLabel, verts: np.ndarray, tris: np.ndarray) -> None:
        vs, ts, n = self.parts[organ]
        vs.append(np.asarray(verts, dtype=np.float64))
        ts.append(np.asarray(tris, dtype=np.int64) + n)
        self.parts[organ] = (vs, ts, n + len(verts))

    def finish(self, seed: int) -> PlantMesh:
        organs = []
        for o, (vs, ts, _) in self.parts.items():
            if not vs:
                continue
            v, t = np.concatenate(vs), np.concatenate(ts)
            # drop slivers so every triangle has positive area
            area = _tri_areas(v, t)
            organs.append(OrganMesh(v, t[area > 1e-12], o))
        return PlantMesh(organs, seed)


def _tri_areas(v: np.ndarray, t: np.ndarray) -> np.ndarray:
    a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def _tube(p0, p1, r0, r1, side_a, side_b, sides: int = 8):
    ang = np.linspace(0, 2 * np.pi, sides, endpoint=False)
    ring = np.cos(ang)[:, None] * side_a + np.sin(ang)[:, None] * side_b
    verts = np.concatenate([p0 + r0 * ring, p1 + r1 * ring])
    i = np.arange(sides)
    j = (i + 1) % sides
    tris = np.concatenate([np.stack([i, j, i + sides], 1), np.stack([j, j + sides, i + sides], 1)])
    return verts, tris


def _blade(base, direction, normal, length, width, fold_deg=20.0, segments=6):
    """Elliptic blade with a folded midrib; tip and base collapse to single vertices."""
    side = np.cross(normal, direction)
    side /= np.linalg.norm(side)
    lift = math.sin(math.radians(fold_deg))
    t = np.linspace(0, 1, segments + 1)[1:-1]
    half = 0.5 * width * np.sin(np.pi * t)
    mid = base + np.outer(t * length, direction)
    left = mid + half[:, None] * side + (lift * half)[:, None] * normal
    right = mid - half[:, None] * side + (lift * half)[:, None] * normal
    n = len(t)
    # vertex layout: base, tip, then rows (left, mid, right)
    rows = np.stack([left, mid, right], axis=1).reshape(-1, 3)
    verts = np.concatenate([base[None], (base + length * direction)[None], rows])
    L = 2 + 3 * np.arange(n)
    M, R = L + 1, L + 2
    tris = [[0, L[0], M[0]], [0, M[0], R[0]], [1, M[-1], L[-1]], [1, R[-1], M[-1]]]
    for k in range(n - 1):
        tris += [[L[k], L[k + 1], M[k]], [M[k], L[k + 1], M[k + 1]],
                 [M[k], M[k + 1], R[k]], [R[k], M[k + 1], R[k + 1]]]
    return verts, np.asarray(tris)


def _patch(base, direction, normal, length, width, curl, nu=4, nv=3):
    """Curved petal patch, cupped towards ``normal``."""
    side = np.cross(normal, direction)
    side /= np.linalg.norm(side)
    u = np.linspace(0, 1, nu + 1)
    v = np.linspace(-1, 1, nv + 1)
    U, V = np.meshgrid(u, v, indexing="ij")
    w = width * (0.35 + 0.65 * np.sin(np.pi * (0.1 + 0.8 * U)))
    pts = (base + U[..., None] * length * direction + (0.5 * w * V)[..., None] * side
           + (curl * (U ** 2 + 0.3 * V ** 2))[..., None] * normal)
    verts = pts.reshape(-1, 3)
    idx = np.arange((nu + 1) * (nv + 1)).reshape(nu + 1, nv + 1)
    a, b = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
    c, d = idx[:-1, 1:].ravel(), idx[1:, 1:].ravel()
    tris = np.concatenate([np.stack([a, b, c], 1), np.stack([c, b, d], 1)])
    return verts, tris


def _icosphere(center, radius):
    t = (1 + 5 ** 0.5) / 2
    v = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
                  [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], float)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
                  [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
                  [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    # one subdivision step
    verts = [tuple(x) for x in v / np.linalg.norm(v, axis=1, keepdims=True)]
    cache: dict = {}

    def mid(i, j):
        key = (min(i, j), max(i, j))
        if key not in cache:
            m = (np.array(verts[i]) + np.array(verts[j])) / 2
            verts.append(tuple(m / np.linalg.norm(m)))
            cache[key] = len(verts) - 1
        return cache[key]

    faces = []
    for a, b, c in f:
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
    return center + radius * np.asarray(verts), np.asarray(faces)


# ---------------------------------------------------------------------------
# L-system


def _derive(params: PlantParams, rng: np.random.Generator, n_main: int) -> list[tuple]:
    """Rewrite the axiom until no apices or buds remain."""
    r_lo, r_hi = params.branch_radius_range
    word: list[tuple] = []
    for i in range(params.n_axes):
        r0 = rng.uniform(r_lo, r_hi)
        n = max(3, n_main + int(rng.integers(-1, 2)))
        word += [("[",), ("/", 360.0 * i / params.n_axes + rng.uniform(-20, 20)),
                 ("&", rng.uniform(4, 16) if params.n_axes > 1 else rng.uniform(0, 5)),
                 ("A", 0, n, r0, 0.45 * r0), ("]",)]
    for _ in range(10_000):
        if not any(m[0] in "AB" for m in word):
            return word
        nxt: list[tuple] = []
        for m in word:
            if m[0] == "A":
                nxt += _grow_apex(m, params, rng)
            elif m[0] == "B":
                nxt += _grow_bud(m, params, rng)
            else:
                nxt.append(m)
        word = nxt
    raise GenerationError("L-system derivation did not terminate")


def _grow_apex(m, params, rng):
    _, order, remaining, r0, r1 = m
    if remaining <= 0:
        return [("K",)] if rng.random() < params.flower_prob_per_axis else []
    lo, hi = params.internode_length_range
    length = rng.uniform(lo, hi) * (0.8 if order else 1.0)
    taper = r0 - (r0 - r1) / max(remaining, 1)
    out = [("+", rng.uniform(-7, 7)), ("&", rng.uniform(-5, 5)), ("I", length, r0, taper),
           ("/", PHYLLOTAXY)]
    out += [("[",), ("&", rng.uniform(45, 70)), ("L", rng.uniform(0.8, 1.1) if order == 0 else 0.8), ("]",)]
    if order + 1 < params.recursion_depth and remaining > 1 and rng.random() < params.branch_prob:
        out += [("[",), ("&", rng.uniform(30, 50)), ("B", order + 1, taper), ("]",)]
    out.append(("A", order, remaining - 1, taper, r1))
    return out


def _grow_bud(m, params, rng):
    _, order, r_parent = m
    long_axis = rng.random() < params.axis_morphotype_probs
    n = int(rng.integers(5, 9)) if long_axis else int(rng.integers(2, 4))
    r0 = 0.7 * r_parent
    return [("A", order, n, r0, 0.5 * r0)]


def _interpret(word: list[tuple], params: PlantParams, rng: np.random.Generator, builder: _Builder):
    pos = np.zeros(3)
    R = np.column_stack([_EZ, _EY, -_EX])  # columns: heading, left, up
    stack = []
    for m in word:
        s = m[0]
        if s == "[":
            stack.append((pos.copy(), R.copy()))
        elif s == "]":
            pos, R = stack.pop()
        elif s == "+":
            R = R @ _rot(_EZ, m[1])
        elif s == "&":
            R = R @ _rot(_EY, m[1])
        elif s == "/":
            R = R @ _rot(_EX, m[1])
        elif s == "I":
            _, length, r0, r1 = m
            # mild upward tropism keeps axes from drooping through the pot
            H = R[:, 0] + 0.12 * _EZ
            H /= np.linalg.norm(H)
            R = _reframe(R, H)
            end = pos + length * H
            v, t = _tube(pos, end, r0, r1, R[:, 1], R[:, 2])
            builder.add(OrganLabel.STEM, v, t)
            pos = end
        elif s == "L":
            _leaf(pos, R, m[1], params, rng, builder)
        elif s == "K":
            _flower(pos, R, params, rng, builder)


def _reframe(R: np.ndarray, H: np.ndarray) -> np.ndarray:
    L = R[:, 1] - H * (H @ R[:, 1])
    if np.linalg.norm(L) < 1e-9:
        L = np.cross(H, _EX if abs(H[0]) < 0.9 else _EY)
    L /= np.linalg.norm(L)
    return np.column_stack([H, L, np.cross(H, L)])


def _leaf(pos, R, scale, params, rng, builder):
    H, U = R[:, 0], R[:, 2]
    petiole_len = rng.uniform(2.5, 4.0) * scale
    pr = 0.07 * scale
    end = pos + petiole_len * H
    v, t = _tube(pos, end, pr, 0.7 * pr, R[:, 1], U, sides=6)
    builder.add(OrganLabel.PETIOLE, v, t)
    for sgn in (-1.0, 1.0):
        d = H + 0.6 * sgn * R[:, 1]
        d /= np.linalg.norm(d)
        v, t = _blade(pos + 0.1 * H, d, U, 0.9 * scale, 0.35 * scale, fold_deg=5, segments=3)
        builder.add(OrganLabel.STIPULE, v, t)
    lo, hi = params.leaflets_per_leaf
    n_leaflets = int(rng.integers(lo, hi + 1)) | 1  # odd-pinnate
    n_pairs = n_leaflets // 2
    # blade normal: turtle up tilted towards the sky
    normal = U + 0.8 * _EZ
    if np.linalg.norm(np.cross(normal, H)) < 1e-6:
        normal = U
    normal /= np.linalg.norm(normal)
    ll_lo, ll_hi = params.leaflet_length_range
    for k in range(n_pairs):
        at = pos + petiole_len * (0.35 + 0.6 * k / max(n_pairs, 1)) * H
        for sgn in (-1.0, 1.0):
            d = _rot(normal, sgn * rng.uniform(50, 75)) @ H
            length = rng.uniform(ll_lo, ll_hi) * scale * (0.8 + 0.2 * k / max(n_pairs, 1))
            v, t = _blade(at, d, normal, length, 0.6 * length)
            builder.add(OrganLabel.LEAFLET, v, t)
    length = rng.uniform(ll_lo, ll_hi) * scale * 1.1
    v, t = _blade(end, H, normal, length, 0.6 * length)
    builder.add(OrganLabel.LEAFLET, v, t)


def _flower(pos, R, params, rng, builder):
    H = R[:, 0]
    stalk = rng.uniform(1.5, 3.0)
    end = pos + stalk * H
    v, t = _tube(pos, end, 0.12, 0.1, R[:, 1], R[:, 2], sides=6)
    builder.add(OrganLabel.STEM, v, t)
    rec_r = rng.uniform(0.4, 0.55)
    center = end + rec_r * H
    v, t = _icosphere(center, rec_r)
    builder.add(OrganLabel.RECEPTACLE, v, t)
    for k in range(5):
        around = _rot(H, 72.0 * k + rng.uniform(-10, 10))
        d = around @ (_rot(R[:, 1], 105.0) @ H)
        n = np.cross(d, around @ R[:, 1])
        n /= np.linalg.norm(n)
        v, t = _blade(center, d, n, rng.uniform(1.6, 2.4), 0.5, fold_deg=10, segments=4)
        builder.add(OrganLabel.SEPAL, v, t)
    lo, hi = params.petal_count_range
    n_petals = int(rng.integers(lo, hi + 1))
    size = rng.uniform(2.0, 2.8)
    for k in range(n_petals):
        ring = k / n_petals
        around = _rot(H, 137.5 * k)
        tilt = 15.0 + 50.0 * ring
        d = around @ (_rot(R[:, 1], tilt) @ H)
        inward = -(around @ R[:, 1])
        inward -= d * (d @ inward)
        inward /= np.linalg.norm(inward)
        base = center + 0.6 * rec_r * H
        v, t = _patch(base, d, inward, size * (0.75 + 0.35 * ring), size * 0.7, curl=0.35 * size)
        builder.add(OrganLabel.PETAL, v, t)


def generate_plant(params: PlantParams, seed: int, max_attempts: int = 100) -> PlantMesh:
    lo_h, hi_h = params.target_height_range
    lo_a, hi_a = params.surface_area_range
    mean_len = float(np.mean(params.internode_length_range))
    ss = np.random.SeedSequence(seed)
    for attempt in ss.spawn(max_attempts):
        rng = np.random.default_rng(attempt)
        target = rng.uniform(lo_h, hi_h)
        # flowers and leaves add roughly 4 cm above the last internode
        n_main = max(1, int(round((target - 4.0) / (mean_len * 0.98))))
        word = _derive(params, rng, n_main)
        builder = _Builder()
        _interpret(word, params, rng, builder)
        mesh = builder.finish(seed)
        height = mesh.extent()[2]
        area = mesh_area(mesh)
        if (lo_h <= height <= hi_h and lo_a <= area <= hi_a
                and {OrganLabel.STEM, OrganLabel.LEAFLET} <= mesh.organ_labels()):
            return mesh
    raise GenerationError(f"no plant within height range {params.target_height_range} and area range "
                          f"{params.surface_area_range} after {max_attempts} attempts")


# ---------------------------------------------------------------------------
# sampling


def mesh_area(mesh: PlantMesh) -> float:
    v, t, _ = mesh.merged()
    return float(_tri_areas(v, t).sum()) if len(t) else 0.0


def sample_mesh(mesh: PlantMesh, density: float = SAMPLING_DENSITY, seed: int = 0,
                name: str = "") -> LabeledPointCloud:
    if density <= 0:
        raise ValueError("density must be positive")
    v, t, organ = mesh.merged()
    areas = _tri_areas(v, t) if len(t) else np.zeros(0)
    total = areas.sum()
    if total <= 0:
        raise SamplingError("cannot sample a mesh with zero area")
    count = int(math.floor(density * total + 0.5))
    if count < 1:
        raise SamplingError(f"density {density} gives no points for area {total:.3g}")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(t), size=count, p=areas / total)
    r1, r2 = rng.random(count), rng.random(count)
    flip = r1 + r2 > 1
    r1[flip], r2[flip] = 1 - r1[flip], 1 - r2[flip]
    a, b, c = v[t[tri, 0]], v[t[tri, 1]], v[t[tri, 2]]
    pts = a + r1[:, None] * (b - a) + r2[:, None] * (c - a)
    labels = merge_organ_codes(organ[tri])
    return LabeledPointCloud(pts, labels, name=name)


def write_off(mesh: PlantMesh, path) -> None:
    v, t, _ = mesh.merged()
    with open(path, "w") as f:
        f.write(f"OFF\n{len(v)} {len(t)} 0\n")
        np.savetxt(f, v, fmt="%.6f")
        np.savetxt(f, np.column_stack([np.full(len(t), 3), t]), fmt="%d")


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Manifest:
    files: list[str]
    seeds: list[int]
    splits: list[str]
    root: Path = field(default_factory=Path)

    def paths(self, split: str) -> list[Path]:
        return [self.root / f for f, s in zip(self.files, self.splits) if s == split]

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["file", "seed", "split"])
            w.writerows(zip(self.files, self.seeds, self.splits))

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([r["file"] for r in rows], [int(r["seed"]) for r in rows],
                   [r["split"] for r in rows], path.parent)


def plant_seeds(n_plants: int, seed: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n_plants)]


def generate_dataset(n_plants: int, params: PlantParams, seed: int, out_dir,
                     density: float = SAMPLING_DENSITY) -> Manifest:
    if n_plants < 1:
        raise ValueError("n_plants must be >= 1")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise GenerationError(f"cannot create dataset directory {out}: {e}") from e
    n_val = math.ceil(n_plants / 6)
    files, seeds, splits = [], [], []
    for i, s in enumerate(plant_seeds(n_plants, seed)):
        mesh = generate_plant(params, s)
        name = f"plant_{i:03d}"
        cloud = sample_mesh(mesh, density, seed=s, name=name)
        try:
            save_cloud(cloud, out / f"{name}.xyzl")
        except OSError as e:
            raise GenerationError(f"cannot write {name}: {e}") from e
        files.append(f"{name}.xyzl")
        seeds.append(s)
        splits.append("validation" if i >= n_plants - n_val else "train")
    manifest = Manifest(files, seeds, splits, out)
    manifest.write(out / "manifest.csv")
    return manifest


def params_to_dict(params: PlantParams) -> dict:
    return asdict(params)
