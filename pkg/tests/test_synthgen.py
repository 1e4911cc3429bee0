import math

import numpy as np
import pytest
from scipy.stats import chisquare

from rosepoint.core import OrganLabel, PartLabel, class_distribution, load_cloud, merge_organ_codes
from rosepoint.synthgen import (GenerationError, Manifest, OrganMesh, PlantMesh, PlantParams, SamplingError,
                                generate_dataset, generate_plant, mesh_area, sample_mesh, write_off)


def separated_mesh(rng, n_tri=100, organs=None):
    """n_tri random triangles, triangle i confined to the slab 10*i <= x < 10*i + 5."""
    verts, tris = [], []
    for i in range(n_tri):
        v = rng.uniform(0, 5, (3, 3))
        v[:, 0] += 10 * i
        verts.append(v)
        tris.append([3 * i, 3 * i + 1, 3 * i + 2])
    verts, tris = np.concatenate(verts), np.array(tris)
    organs = organs if organs is not None else [OrganLabel.LEAFLET] * n_tri
    ms = [OrganMesh(verts[3 * i:3 * i + 3], np.array([[0, 1, 2]]), OrganLabel(organs[i])) for i in range(n_tri)]
    return PlantMesh(ms, 0)


def tri_areas(mesh):
    v, t, _ = mesh.merged()
    return 0.5 * np.linalg.norm(np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]]), axis=1)


def test_params_validation():
    with pytest.raises(ValueError):
        PlantParams(flower_prob_per_axis=1.5)
    with pytest.raises(ValueError):
        PlantParams(internode_length_range=(3.0, 2.0))
    with pytest.raises(ValueError):
        PlantParams(recursion_depth=0)


def test_no_flowers_when_probability_zero():
    p = PlantParams(n_axes=1, recursion_depth=1, flower_prob_per_axis=0.0,
                    surface_area_range=(50.0, 5000.0))
    mesh = generate_plant(p, 3)
    assert mesh.organ_labels() <= {OrganLabel.STEM, OrganLabel.PETIOLE, OrganLabel.STIPULE, OrganLabel.LEAFLET}
    assert {OrganLabel.STEM, OrganLabel.LEAFLET} <= mesh.organ_labels()


def test_generation_is_deterministic():
    a, b = generate_plant(PlantParams(), 11), generate_plant(PlantParams(), 11)
    va, ta, oa = a.merged()
    vb, tb, ob = b.merged()
    assert va.tobytes() == vb.tobytes() and ta.tobytes() == tb.tobytes() and oa.tobytes() == ob.tobytes()


def test_mesh_invariants():
    mesh = generate_plant(PlantParams(), 5)
    for om in mesh.organs:
        assert om.triangles.min() >= 0 and om.triangles.max() < len(om.vertices)
    assert tri_areas(mesh).min() > 1e-12
    assert 30.0 <= mesh.extent()[2] <= 50.0


@pytest.mark.slow
def test_heights_over_48_seeds():
    for s in range(48):
        h = generate_plant(PlantParams(), s).extent()[2]
        assert 30.0 <= h <= 50.0, (s, h)


def test_impossible_height_raises():
    p = PlantParams(target_height_range=(200.0, 201.0))
    with pytest.raises(GenerationError):
        generate_plant(p, 0, max_attempts=3)


def test_mesh_area_analytic():
    tri = PlantMesh([OrganMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.]]), np.array([[0, 1, 2]]),
                               OrganLabel.LEAFLET)], 0)
    assert mesh_area(tri) == pytest.approx(0.5)
    sq = PlantMesh([OrganMesh(np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0.]]),
                              np.array([[0, 1, 2], [0, 2, 3]]), OrganLabel.LEAFLET)], 0)
    assert mesh_area(sq) == pytest.approx(1.0)


def test_mesh_area_permutation_sum(rng):
    mesh = separated_mesh(rng)
    areas = tri_areas(mesh)
    assert abs(mesh_area(mesh) - sum(areas[rng.permutation(len(areas))].tolist())) < 1e-9


def test_single_triangle_containment():
    v = np.array([[0, 0, 0], [2, 0, 0], [0, 1, 1.]])
    mesh = PlantMesh([OrganMesh(v, np.array([[0, 1, 2]]), OrganLabel.PETAL)], 0)
    area = mesh_area(mesh)
    cloud = sample_mesh(mesh, 1000 / area, seed=1)
    assert len(cloud) == 1000
    # barycentric coordinates by least squares against the two edges
    e = np.stack([v[1] - v[0], v[2] - v[0]], axis=1)
    uv, *_ = np.linalg.lstsq(e, (cloud.positions - v[0]).T, rcond=None)
    assert uv.min() >= -1e-9 and uv.sum(0).max() <= 1 + 1e-9
    assert np.abs(e @ uv - (cloud.positions - v[0]).T).max() < 1e-9
    assert set(cloud.labels.tolist()) == {PartLabel.FLOWER}


def test_count_contract(rng):
    mesh = separated_mesh(rng, 20)
    for d in (0.37, 3.0, 11.5):
        assert len(sample_mesh(mesh, d, seed=2)) == math.floor(d * mesh_area(mesh) + 0.5)


def test_area_ratio_chi_square():
    v = np.array([[0, 0, 0], [3, 0, 0], [0, 2, 0], [10, 0, 0], [11, 0, 0], [10, 2, 0.]])
    mesh = PlantMesh([OrganMesh(v, np.array([[0, 1, 2], [3, 4, 5]]), OrganLabel.LEAFLET)], 0)
    cloud = sample_mesh(mesh, 40000 / mesh_area(mesh), seed=4)
    counts = np.bincount((cloud.positions[:, 0] >= 5).astype(int), minlength=2)
    assert chisquare(counts, np.array([0.75, 0.25]) * counts.sum()).pvalue >= 0.001


def test_label_consistency(rng):
    organs = rng.integers(0, 7, 100)
    mesh = separated_mesh(rng, 100, organs)
    cloud = sample_mesh(mesh, 5.0, seed=3)
    src = (cloud.positions[:, 0] // 10).astype(int)
    assert np.array_equal(cloud.labels, merge_organ_codes(organs[src]))


def test_zero_area_mesh():
    v = np.array([[0, 0, 0], [1, 1, 1], [2, 2, 2.]])
    mesh = PlantMesh([OrganMesh(v, np.array([[0, 1, 2]]), OrganLabel.STEM)], 0)
    with pytest.raises(SamplingError):
        sample_mesh(mesh, 10.0)


@pytest.mark.slow
def test_default_point_count_range():
    cloud = sample_mesh(generate_plant(PlantParams(), 2), 120.0, seed=2)
    assert 150_000 <= len(cloud) <= 300_000


def test_dataset_split_rule_and_determinism(tmp_path):
    m = generate_dataset(6, PlantParams(), 9, tmp_path / "a", density=1.0)
    assert m.splits.count("train") == 5 and m.splits.count("validation") == 1
    assert m.splits[-1] == "validation"
    m2 = generate_dataset(6, PlantParams(), 9, tmp_path / "b", density=1.0)
    assert (tmp_path / "a" / "manifest.csv").read_text() == (tmp_path / "b" / "manifest.csv").read_text()
    for f in m.files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    back = Manifest.read(tmp_path / "a" / "manifest.csv")
    assert back.files == m.files and back.seeds == m.seeds
    assert len(load_cloud(back.paths("validation")[0])) > 0


def test_manifest_split_for_48():
    # only the split rule matters here, so write no clouds
    n, n_val = 48, math.ceil(48 / 6)
    assert (n - n_val, n_val) == (40, 8)


def test_synthetic_class_balance_leaf_dominates():
    labels = np.concatenate([sample_mesh(generate_plant(PlantParams(), s), 4.0, seed=s).labels for s in range(4)])
    frac = class_distribution(labels)
    assert frac.argmax() == PartLabel.LEAF
    # within 10 points of the 16.25 / 65.80 / 17.95 split
    assert np.all(np.abs(frac - [0.1625, 0.6580, 0.1795]) < 0.10)


def test_write_off(tmp_path, rng):
    mesh = separated_mesh(rng, 3)
    write_off(mesh, tmp_path / "m.off")
    lines = (tmp_path / "m.off").read_text().splitlines()
    assert lines[0] == "OFF" and lines[1] == "9 3 0"
