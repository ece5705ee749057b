import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from cellsdf.sdfdata import (
    ConfigError,
    ContentError,
    GridSampler,
    IngestError,
    SampleBatch,
    SamplingConfig,
    SchemaError,
    SdfGrid,
    VoxelSequence,
    center_and_align,
    denormalize,
    draw_training_batch,
    load_voxel_sequence,
    normalize_to_domain,
    read_grid,
    resample_isotropic,
    save_voxel_sequence,
    signed_distance_transform,
    time_coordinate,
    write_grid,
)

from conftest import brute_force_sdf


def ball(n, center, r, spacing=(1, 1, 1)):
    g = np.indices((n, n, n)).astype(float)
    d2 = sum(((g[a] - center[a]) * spacing[a]) ** 2 for a in range(3))
    return (d2 <= r * r).astype(np.uint8)


def ellipsoid(n, center, radii):
    g = np.indices((n, n, n)).astype(float)
    q = sum(((g[a] - center[a]) / radii[a]) ** 2 for a in range(3))
    return (q <= 1).astype(np.uint8)


# -- ingest -------------------------------------------------------------------


def test_sequence_roundtrip(tmp_path):
    vols = [ball(12, (6, 6, 6), r) for r in (2, 3, 4)]
    seq = VoxelSequence(vols, (0.125, 0.125, 0.125), "demo")
    save_voxel_sequence(tmp_path / "s", seq)
    back = load_voxel_sequence(tmp_path / "s")
    assert back.n_time == 3 and back.name == "demo" and back.spacing == (0.125,) * 3
    for a, b in zip(vols, back.volumes):
        assert np.array_equal(a, b)


def test_single_voxel_single_frame(tmp_path):
    v = np.zeros((5, 5, 5), np.uint8)
    v[2, 2, 2] = 1
    save_voxel_sequence(tmp_path, VoxelSequence([v], (1, 1, 1)))
    assert load_voxel_sequence(tmp_path).n_time == 1


def test_raw_layout_is_x_fastest(tmp_path):
    v = np.zeros((4, 3, 2), np.uint8)
    v[1, 0, 0] = 1
    save_voxel_sequence(tmp_path, VoxelSequence([v], (1, 1, 1)))
    raw = (tmp_path / "frame_0000.raw").read_bytes()
    assert raw[1] == 1 and sum(raw) == 1


def test_empty_frame_rejected(tmp_path):
    vols = [ball(8, (4, 4, 4), 2) for _ in range(9)]
    vols[7] = np.zeros_like(vols[7])
    with pytest.raises(ContentError, match="empty frame 7"):
        VoxelSequence(vols, (1, 1, 1))
    save_voxel_sequence(tmp_path, VoxelSequence(vols[:7], (1, 1, 1)))
    (tmp_path / "frame_0007.raw").write_bytes(bytes(512))
    meta = json.loads((tmp_path / "meta.json").read_text())
    meta["n_time"] = 8
    (tmp_path / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(ContentError, match="empty frame 7"):
        load_voxel_sequence(tmp_path)


def test_missing_and_truncated_frames(tmp_path):
    save_voxel_sequence(tmp_path, VoxelSequence([ball(8, (4, 4, 4), 2)] * 3, (1, 1, 1)))
    (tmp_path / "frame_0001.raw").write_bytes(b"\x00" * 10)
    with pytest.raises(SchemaError, match="frame 1"):
        load_voxel_sequence(tmp_path)
    (tmp_path / "frame_0001.raw").unlink()
    with pytest.raises(IngestError, match="frame 1"):
        load_voxel_sequence(tmp_path)


def test_dims_mismatch_is_schema_error():
    with pytest.raises(SchemaError):
        VoxelSequence([ball(8, (4, 4, 4), 2), ball(9, (4, 4, 4), 2)], (1, 1, 1))
    with pytest.raises(SchemaError):
        VoxelSequence([ball(8, (4, 4, 4), 2)], (1, 0, 1))


# -- distance transform --------------------------------------------------------


def test_single_voxel_edt():
    v = np.zeros((16, 16, 16), np.uint8)
    v[8, 8, 8] = 1
    d = signed_distance_transform(v)
    assert d[11, 8, 8] == 3.0
    assert d[8, 8, 8] < 0
    assert np.array_equal(d, brute_force_sdf(v))


def test_anisotropic_neighbours():
    v = np.zeros((5, 5, 5), np.uint8)
    v[2, 2, 2] = 1
    d = signed_distance_transform(v, (1.0, 1.0, 2.0))
    assert d[2, 2, 3] == 2.0 and d[3, 2, 2] == 1.0
    assert np.allclose(d, brute_force_sdf(v, (1.0, 1.0, 2.0)), rtol=0, atol=1e-12)


def test_half_space_is_linear():
    v = np.zeros((16, 6, 6), np.uint8)
    v[:8] = 1
    d = signed_distance_transform(v)
    # boundary on the face between x=7 and x=8
    assert np.array_equal(d[:, 3, 3], np.concatenate([-np.arange(8, 0, -1), np.arange(1, 9)]).astype(float))


def test_all_foreground_or_background_rejected():
    with pytest.raises(ContentError):
        signed_distance_transform(np.ones((4, 4, 4)))
    with pytest.raises(ContentError):
        signed_distance_transform(np.zeros((4, 4, 4)))


@settings(max_examples=40, deadline=None)
@given(
    dims=st.tuples(*[st.integers(2, 7)] * 3),
    density=st.floats(0.05, 0.9),
    seed=st.integers(0, 2**31),
    spacing=st.tuples(*[st.sampled_from([0.5, 1.0, 1.5, 2.0])] * 3),
)
def test_edt_matches_brute_force(dims, density, seed, spacing):
    r = np.random.default_rng(seed)
    v = (r.random(dims) < density).astype(np.uint8)
    if v.all() or not v.any():
        return
    d = signed_distance_transform(v, spacing)
    assert np.allclose(d, brute_force_sdf(v, spacing), rtol=0, atol=1e-12)
    # sign consistency
    assert np.all(d[v == 1] < 0) and np.all(d[v == 0] > 0)
    # boundary voxels within one spacing of the surface
    inner = ndimage.binary_erosion(v, border_value=1)
    assert np.all(np.abs(d[(v == 1) & ~inner]) <= max(spacing))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_lipschitz_between_same_sign_neighbours(seed):
    r = np.random.default_rng(seed)
    v = ndimage.binary_dilation(r.random((10, 10, 10)) < 0.02, iterations=2).astype(np.uint8)
    if v.all() or not v.any():
        return
    d = signed_distance_transform(v)
    for axis in range(3):
        a = np.moveaxis(d, axis, 0)
        diff = np.abs(a[1:] - a[:-1])
        same = np.sign(a[1:]) == np.sign(a[:-1])
        assert np.all(diff[same] <= 1.0 + 1e-6)


# -- normalization -------------------------------------------------------------


def test_normalization_scale():
    v = ball(256, (128, 128, 128), 60)
    sdf = signed_distance_transform(v, (0.125,) * 3)
    g = normalize_to_domain(sdf, (0.125,) * 3, time_index=29, n_time=30)
    assert g.scale == 16.0
    assert g.time_coord == 1.0
    assert 0.6 / g.scale == 0.0375
    assert np.allclose(denormalize(g), sdf, rtol=1e-6)


def test_time_coordinates():
    assert time_coordinate(0, 30) == -1.0
    assert time_coordinate(29, 30) == 1.0
    assert time_coordinate(0, 1) == 0.0
    assert time_coordinate(14, 29) == 0.0


def test_normalization_roundtrip_f64():
    sdf = np.linspace(-3, 5, 64).reshape(4, 4, 4)
    g = normalize_to_domain(sdf, (0.5, 0.5, 0.5))
    back = np.asarray(g.values, np.float64) * g.scale
    assert np.allclose(back, sdf, rtol=1e-6)
    assert float(normalize_to_domain(np.zeros((2, 2, 2)), 1.0).values.max()) == 0.0


def test_anisotropic_normalization_rejected():
    with pytest.raises(SchemaError):
        normalize_to_domain(np.ones((4, 4, 4)), (1, 1, 2))


def test_grid_geometry():
    g = SdfGrid(np.zeros((4, 4, 2), np.float32))
    assert g.step == 0.5
    assert np.allclose(g.axis_coords(0), [-0.75, -0.25, 0.25, 0.75])
    assert np.allclose(g.axis_coords(2), [-0.25, 0.25])
    assert np.abs(g.coords()).max() < 1


def test_resample_isotropic_preserves_shape():
    v = ellipsoid(32, (15.5, 15.5, 15.5), (10, 8, 8))[:, :, ::2]  # spacing (1, 1, 2)
    out, s = resample_isotropic(v, (1.0, 1.0, 2.0), 32)
    assert s == 1.0 and out.shape == (32, 32, 32)
    ref = ellipsoid(32, (15.5, 15.5, 15.5), (10, 8, 8))
    inter = np.logical_and(out, ref).sum()
    assert 2 * inter / (out.sum() + ref.sum()) > 0.9


# -- grid files ------------------------------------------------------------------


def test_grid_file_roundtrip(tmp_path, rng):
    g = SdfGrid(rng.normal(size=(5, 6, 7)).astype(np.float32), -0.25, 16.0)
    write_grid(tmp_path / "a.nsdf", g)
    h = read_grid(tmp_path / "a.nsdf")
    assert np.array_equal(g.values, h.values) and h.time_coord == -0.25 and h.scale == 16.0
    data = (tmp_path / "a.nsdf").read_bytes()
    assert data[:8] == b"NSDF0001" and len(data) == 44 + 4 * 210
    (tmp_path / "b.nsdf").write_bytes(data[:-4])
    with pytest.raises(IngestError):
        read_grid(tmp_path / "b.nsdf")
    (tmp_path / "c.nsdf").write_bytes(b"X" + data[1:])
    with pytest.raises(IngestError):
        read_grid(tmp_path / "c.nsdf")


# -- centring and alignment ----------------------------------------------------


def centroid(v):
    return np.argwhere(v).mean(axis=0)


def test_centering_offset_blob():
    v = ball(32, (25.5, 15.5, 15.5), 4)
    out = center_and_align(VoxelSequence([v], (1, 1, 1)), align=False).volumes[0]
    assert np.all(np.abs(centroid(out) - 15.5) <= 0.5)
    assert out.sum() == v.sum()


def test_aligned_ellipsoid_unchanged():
    v = ellipsoid(32, (15.5, 15.5, 15.5), (12, 7, 4))
    out = center_and_align(VoxelSequence([v], (1, 1, 1))).volumes[0]
    dsc = 2 * np.logical_and(out, v).sum() / (out.sum() + v.sum())
    assert dsc >= 0.99


def test_rotated_ellipsoid_gets_long_axis_on_x():
    g = np.indices((40, 40, 40)).astype(float) - 19.5
    c, s = np.cos(0.7), np.sin(0.7)
    u = c * g[0] + s * g[1]
    w = -s * g[0] + c * g[1]
    v = ((u / 14) ** 2 + (w / 6) ** 2 + (g[2] / 4) ** 2 <= 1).astype(np.uint8)
    out = center_and_align(VoxelSequence([v], (1, 1, 1))).volumes[0]
    pts = np.argwhere(out) - centroid(out)
    ext = pts.std(axis=0)
    assert ext[0] > ext[1] > ext[2]


def test_centering_is_idempotent():
    r = np.random.default_rng(3)
    v = ellipsoid(40, (22, 17, 20), (11, 6, 4))
    v |= ball(40, (30, 17, 20), 4)
    once = center_and_align(VoxelSequence([v], (1, 1, 1)))
    twice = center_and_align(once)
    assert np.array_equal(once.volumes[0], twice.volumes[0])
    del r


def test_two_components_placed_in_halves():
    v = ball(40, (10, 20, 20), 4) | ball(40, (28, 12, 24), 5)
    out = center_and_align(VoxelSequence([v], (1, 1, 1))).volumes[0]
    labels, n = ndimage.label(out, np.ones((3, 3, 3)))
    assert n == 2
    cs = sorted(centroid(labels == i)[0] for i in (1, 2))
    assert abs(cs[0] - (19.5 - 10)) <= 0.5 and abs(cs[1] - (19.5 + 10)) <= 0.5


def test_three_components_rejected():
    v = ball(40, (8, 8, 8), 3) | ball(40, (30, 30, 30), 3) | ball(40, (8, 30, 20), 3)
    with pytest.raises(ContentError):
        center_and_align(VoxelSequence([v], (1, 1, 1)))


# -- sampling ----------------------------------------------------------------------


def sphere_grid(n=24, r=0.5, t=0.0, scale=16.0):
    g = SdfGrid(np.zeros((n, n, n), np.float32), t, scale)
    g.values = (np.linalg.norm(g.coords(), axis=1) - r).reshape(n, n, n).astype(np.float32)
    return g


def test_strata_split(rng):
    g = sphere_grid()
    near, far = GridSampler().draw(g, 10, rng)
    assert len(near) == 7 and len(far) == 3
    thr = 0.6 / g.scale
    flat = g.values.reshape(-1)
    assert np.all(flat[near] <= thr) and np.all(flat[far] > thr)


def test_stratum_exhaustion_borrows(rng, caplog):
    v = np.full((6, 6, 6), 2.0, np.float32)
    v.reshape(-1)[:5] = 0.0
    g = SdfGrid(v, 0.0, 1.0)
    with caplog.at_level(logging.INFO):
        near, far = GridSampler().draw(g, 10, rng)
    assert len(near) == 5 and len(far) == 5
    assert "exhausted" in caplog.text


def test_too_many_points(rng):
    with pytest.raises(ConfigError):
        GridSampler().draw(sphere_grid(4), 65, rng)


def test_sampling_fraction_is_exact(rng):
    g = sphere_grid(32)
    s = GridSampler()
    thr = 0.6 / g.scale
    frac = []
    for _ in range(1000):
        near, far = s.draw(g, 100, rng)
        idx = np.concatenate([near, far])
        frac.append(np.mean(g.values.reshape(-1)[idx] <= thr))
    assert np.all(np.array(frac) == 0.7)


def test_million_point_split():
    n = round(0.7 * 1_000_000)
    assert (n, 1_000_000 - n) == (700_000, 300_000)


def test_training_batch(rng):
    grids = {i: [sphere_grid(16, 0.3 + 0.05 * i, t) for t in (-1.0, 1.0)] for i in range(3)}
    cfg = SamplingConfig(batch_sequences=5, points_per_timepoint=50)
    b = draw_training_batch(grids, rng, cfg)
    assert len(b) == 250
    assert set(np.unique(b.seq_ids)) <= {0, 1, 2}
    for k in range(5):
        part = slice(50 * k, 50 * (k + 1))
        assert len(np.unique(b.seq_ids[part])) == 1 and len(np.unique(b.times[part])) == 1
    # targets are the grid values at the sampled points
    g0 = grids[int(b.seq_ids[0])][0 if b.times[0] == -1.0 else 1]
    d = np.linalg.norm(b.points[:50], axis=1) - (0.3 + 0.05 * int(b.seq_ids[0]))
    assert np.allclose(b.targets[:50], d, atol=1e-6)
    del g0


def test_batch_is_reproducible():
    grids = {0: [sphere_grid(16)], 1: [sphere_grid(16, 0.4)]}
    cfg = SamplingConfig(points_per_timepoint=40)
    a = draw_training_batch(grids, np.random.default_rng(5), cfg)
    b = draw_training_batch(grids, np.random.default_rng(5), cfg)
    assert np.array_equal(a.points, b.points) and np.array_equal(a.seq_ids, b.seq_ids)


def test_sample_batch_validation():
    with pytest.raises(SchemaError):
        SampleBatch(np.zeros((2, 3)), np.zeros(3), np.zeros(2), np.zeros(2))
    with pytest.raises(SchemaError):
        SampleBatch(np.full((1, 3), 1.5), np.zeros(1), np.zeros(1), np.zeros(1))
