import csv

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cellsdf.infer import MeshSurface, marching_cubes, voxelize
from cellsdf.metrics import (
    SERIES_COLUMNS,
    ShapeMetrics,
    descriptor_series,
    dice,
    kolmogorov_q,
    ks_statistic,
    ks_two_sample,
    latent_pca,
    nearest_centroid_labels,
    shape_metrics,
    sphericity,
    write_json,
    write_pca_csv,
    write_series_csv,
)
from cellsdf.sdfdata import ContentError, SdfGrid

CUBE_V = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], float)
# outward-wound faces of the unit cube (vertex index = 4x + 2y + z)
CUBE_T = np.array(
    [[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
     [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]]
)


def cube(side=1.0):
    return MeshSurface(CUBE_V * side, CUBE_T.copy())


def analytic_grid(n, fn, scale=1.0):
    g = SdfGrid(np.zeros((n, n, n), np.float32), 0.0, scale)
    g.values = fn(g.coords()).reshape(n, n, n)
    return g


def ellipsoid_mesh(a, b, c, n=40):
    return marching_cubes(analytic_grid(n, lambda p: (np.sqrt((p[:, 0] / a) ** 2 + (p[:, 1] / b) ** 2 + (p[:, 2] / c) ** 2) - 1) * min(a, b, c)))


# -- overlap -----------------------------------------------------------------------


def test_dice_cases():
    a = np.zeros((4, 4, 4), bool)
    b = a.copy()
    assert dice(a, b) == 1.0
    a[:2] = True
    assert dice(a, a) == 1.0
    b[1:3] = True
    assert dice(a, b) == 0.5
    assert dice(a, ~a) == 0.0
    with pytest.raises(ValueError):
        dice(a, a[:3])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_dice_symmetric_and_bounded(seed):
    r = np.random.default_rng(seed)
    a, b = r.random((5, 5, 5)) < 0.4, r.random((5, 5, 5)) < 0.6
    d = dice(a, b)
    assert d == dice(b, a) and 0 <= d <= 1


# -- shape descriptors -----------------------------------------------------------------


def test_sphere_descriptors():
    # radius 5 um sphere in a 32 um field of view sampled at 128^3
    g = analytic_grid(128, lambda p: np.linalg.norm(p, axis=1) - 5 / 16, scale=16.0)
    mesh = marching_cubes(g).scaled(16.0, "um")
    m = shape_metrics(mesh)
    assert m.sphericity >= 0.98
    assert abs(m.surface - 4 * np.pi * 25) / (4 * np.pi * 25) < 0.02
    assert abs(m.volume - 4 / 3 * np.pi * 125) / (4 / 3 * np.pi * 125) < 0.02
    vox = shape_metrics(mesh, "voxel", voxelize(g), (0.25, 0.25, 0.25))
    assert abs(vox.volume - m.volume) / m.volume < 0.02


def test_cube_sphericity():
    m = shape_metrics(cube())
    assert m.surface == 6.0 and abs(m.volume - 1.0) < 1e-12
    assert abs(m.sphericity - 0.806) <= 0.005
    assert abs(m.sphericity - (np.pi / 6) ** (1 / 3)) < 1e-12


def test_scale_laws():
    mesh = ellipsoid_mesh(0.7, 0.5, 0.3, 32)
    base = shape_metrics(mesh)
    for s in (0.1, 3.0, 17.5):
        m = shape_metrics(mesh.scaled(s, "um"))
        assert abs(m.surface / base.surface - s * s) <= 1e-9 * s * s
        assert abs(m.volume / base.volume - s**3) <= 1e-9 * s**3
        assert abs(m.sphericity - base.sphericity) <= 1e-9


@settings(max_examples=8, deadline=None)
@given(st.floats(0.25, 0.85), st.floats(0.25, 0.85), st.floats(0.25, 0.85))
def test_sphericity_at_most_one(a, b, c):
    m = shape_metrics(ellipsoid_mesh(a, b, c, 24))
    assert m.sphericity <= 1.0 + 1e-9


def test_degenerate_meshes():
    with pytest.raises(ContentError):
        shape_metrics(MeshSurface(np.zeros((0, 3)), np.zeros((0, 3), int)))
    open_mesh = MeshSurface(CUBE_V, CUBE_T[:-2])
    with pytest.raises(ContentError):
        shape_metrics(open_mesh)
    m = shape_metrics(open_mesh, "voxel", np.ones((2, 2, 2)), (0.5, 0.5, 0.5))
    assert m.volume == 1.0
    with pytest.raises(ValueError):
        shape_metrics(cube(), "voxel")
    assert sphericity(1.0, 6.0) == shape_metrics(cube()).sphericity


def test_descriptor_series_matches_sort_oracle(rng):
    vals = rng.normal(10, 2, size=(7, 3, 3))
    table = [[ShapeMetrics(*vals[s, t]) for t in range(3)] for s in range(7)]
    series = descriptor_series(table, times=[0.0, 0.5, 1.0])
    for mi, name in enumerate(("surface", "volume", "sphericity")):
        for t in range(3):
            col = np.sort(vals[:, t, mi])
            # 7 values: quartiles fall on order statistics 1.5, 3 and 4.5
            assert np.isclose(series.column(name, "median")[t], col[3])
            assert np.isclose(series.column(name, "iqr_lo")[t], (col[1] + col[2]) / 2)
            assert np.isclose(series.column(name, "iqr_hi")[t], (col[4] + col[5]) / 2)
            assert series.column(name, "min")[t] == col[0] and series.column(name, "max")[t] == col[-1]
            assert np.isclose(series.column(name, "mean")[t], col.mean())
    assert series.column("volume", "time").tolist() == [0.0, 0.5, 1.0]
    with pytest.raises(ValueError):
        descriptor_series([table[0], table[1][:2]])


# -- KS test -----------------------------------------------------------------------------


def mp_kolmogorov_sf(lam):
    return float(2 * mpmath.nsum(lambda k: (-1) ** (k - 1) * mpmath.exp(-2 * k * k * lam * lam), [1, mpmath.inf]))


def test_ks_identical_and_disjoint(rng):
    x = rng.normal(size=50)
    assert ks_two_sample(x, x.copy()) == (0.0, 1.0)
    d, p = ks_two_sample(x, x + 100)
    assert d == 1.0 and p < 1e-10
    with pytest.raises(ValueError):
        ks_two_sample([1.0], [1.0, 2.0])


def test_ks_series_oracle():
    x = np.arange(100.0)
    d, p = ks_two_sample(x, x + 20)
    assert abs(d - 0.2) < 1e-12
    ref = mp_kolmogorov_sf(mpmath.sqrt(50) * mpmath.mpf("0.2"))
    assert abs(p - ref) / ref < 0.02


@pytest.mark.parametrize("lam", [0.3, 0.6, 0.9, 0.99, 1.0, 1.5, 2.5])
def test_kolmogorov_branches(lam):
    assert abs(kolmogorov_q(lam) - mp_kolmogorov_sf(lam)) < 1e-10


def test_ks_invariant_under_monotone_transform(rng):
    x, y = rng.normal(size=40), rng.normal(0.3, 1, size=60)
    assert ks_statistic(x, y) == ks_statistic(np.exp(x), np.exp(y))
    assert ks_two_sample(x, y) == ks_two_sample(x**3, y**3)


def test_ks_permutation(rng):
    x, y = rng.normal(size=30), rng.normal(size=30)
    d, p = ks_two_sample(x, y, "permutation", 300, np.random.default_rng(0))
    assert d == ks_statistic(x, y) and 0 < p <= 1
    _, p_far = ks_two_sample(x, y + 5, "permutation", 300, np.random.default_rng(0))
    assert p_far == 1 / 301


# -- latent PCA ---------------------------------------------------------------------------


def test_pca_rank_one(rng):
    direction = np.array([1.0, 2.0, -2.0]) / 3
    z = rng.normal(size=(20, 1)) * direction + 5
    res = latent_pca(z)
    assert abs(res.ratios[0] - 1) < 1e-12
    assert abs(abs(res.components[0] @ direction) - 1) < 1e-12
    assert np.isclose(res.cumulative[-1], 1.0)


def test_pca_isotropic(rng):
    res = latent_pca(rng.normal(size=(2000, 8)))
    assert ((res.ratios >= 0.08) & (res.ratios <= 0.17)).all()
    assert np.all(np.diff(res.ratios) <= 0)
    with pytest.raises(ValueError):
        latent_pca(np.zeros((1, 3)))


def test_nearest_centroid():
    codes = np.array([[0, 0], [0, 1], [10, 10], [10, 11]], float)
    labels = np.array(["a", "a", "b", "b"])
    assert nearest_centroid_labels(codes, labels, [[1, 1], [9, 9]]).tolist() == ["a", "b"]


def test_report_writers(tmp_path, rng):
    table = [[ShapeMetrics(1.0 + s, 2.0, 0.9)] * 2 for s in range(3)]
    series = descriptor_series(table)
    write_series_csv(tmp_path / "s.csv", series, "surface")
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert tuple(rows[0]) == SERIES_COLUMNS and float(rows[1][1]) == 2.0
    write_pca_csv(tmp_path / "p.csv", latent_pca(rng.normal(size=(5, 3))))
    write_json(tmp_path / "r.json", {"a": np.float32(1.5), "b": np.arange(2), "c": table[0][0]})
    assert (tmp_path / "r.json").read_text().count("1.5") == 1
