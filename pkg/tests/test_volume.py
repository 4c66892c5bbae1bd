import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from mocoreg.errors import ConstantVolume, EmptyMask, GridMismatch
from mocoreg.geometry import Quaternion, RigidTransform, random_rotation
from mocoreg.phantom import blobs_phantom, sphere_phantom
from mocoreg.spectral import DeformationField
from mocoreg.volume import (
    Grid,
    KeypointBankConfig,
    Mask3,
    Volume3,
    band_indicators,
    distance_transform,
    extract_keypoints,
    extract_keypoints_dense,
    gaussian_smooth,
    inside_distance,
    normalize_intensity,
    resample_mask,
    resample_rigid,
    sample_trilinear,
    shape_channel,
    warp_deformable,
)


def _vol(data, spacing=(1.0, 1.0, 1.0)):
    return Volume3(np.asarray(data, float), spacing, (0.0, 0.0, 0.0))


def _brute_edt(mask, spacing):
    idx = np.argwhere(np.ones(mask.shape, bool)) * spacing
    pts = np.argwhere(mask) * spacing
    d = np.sqrt(((idx[:, None, :] - pts[None, :, :]) ** 2).sum(-1)).min(1)
    return d.reshape(mask.shape)


# -- grid and containers -----------------------------------------------------------


def test_grid_world_and_index_coords_round_trip():
    g = Grid((4, 5, 6), (1.0, 2.0, 3.0), (10.0, -5.0, 0.5))
    w = g.world_coords()
    np.testing.assert_allclose(g.to_index(w), g.index_coords(), atol=1e-12)
    np.testing.assert_allclose(g.center, [11.5, -1.0, 8.0])


def test_volume_rejects_bad_shapes():
    with pytest.raises(ValueError):
        Volume3(np.zeros((2, 2)), (1, 1, 1), (0, 0, 0))
    with pytest.raises(ValueError):
        Volume3(np.zeros((2, 2, 2)), (1, 0, 1), (0, 0, 0))


# -- resampling ---------------------------------------------------------------------


def test_resample_identity_is_exact(blobs32):
    vol, _ = blobs32
    out = resample_rigid(vol, RigidTransform.identity())
    assert np.max(np.abs(out.data - vol.data)) < 1e-12


def test_resample_one_voxel_translation_is_an_index_shift(rng):
    vol = _vol(rng.random((10, 9, 8)), (2.0, 1.0, 1.0))
    out = resample_rigid(vol, RigidTransform(Quaternion.identity(), (2.0, 0, 0)))
    np.testing.assert_allclose(out.data[1:], vol.data[:-1], atol=1e-9)


def test_resample_quarter_turn_is_an_axis_permutation(rng):
    data = rng.random((9, 9, 9))
    vol = _vol(data)
    q = RigidTransform.about_pivot(Quaternion.from_axis_angle([0, 0, 1], math.pi / 2), vol.grid.center)
    out = resample_rigid(vol, q)
    # out(i, j, k) = vol(R^-1 (i, j, k)) about the centre, R^-1 maps (x, y) -> (y, -x),
    # so out[i, j, k] = data[j, 8 - i, k]
    expected = np.transpose(data[:, ::-1, :], (1, 0, 2))
    np.testing.assert_allclose(out.data[1:-1, 1:-1, 1:-1], expected[1:-1, 1:-1, 1:-1], atol=1e-6)


def test_out_of_bounds_samples_are_zero():
    vals = sample_trilinear(np.ones((4, 4, 4)), np.array([[-2.0, 10.0], [0.0, 0.0], [0.0, 0.0]]))
    assert vals.tolist() == [0.0, 0.0]


def test_trilinear_reproduces_affine_functions(rng):
    i, j, k = np.meshgrid(*(np.arange(6.0),) * 3, indexing="ij")
    data = 1.0 + 2 * i - 3 * j + 0.5 * k
    pts = rng.uniform(0, 5, (3, 50))
    got, grad = sample_trilinear(data, pts, with_grad=True)
    np.testing.assert_allclose(got, 1 + 2 * pts[0] - 3 * pts[1] + 0.5 * pts[2], atol=1e-12)
    np.testing.assert_allclose(grad, np.broadcast_to(np.array([2.0, -3.0, 0.5])[:, None], grad.shape), atol=1e-12)


@given(st.integers(0, 10_000))
def test_resample_round_trip_bound(seed):
    vol, mask = blobs_phantom((32, 32, 32), 3.0, seed=seed % 5, extent=0.22)
    rng = np.random.default_rng(seed)
    q = RigidTransform.about_pivot(random_rotation(rng, 20.0), vol.grid.center, rng.uniform(-6, 6, 3))
    back = resample_rigid(resample_rigid(vol, q), q.inverse())
    err = (back.data - vol.data)[2:-2, 2:-2, 2:-2]
    assert np.sqrt(np.mean(err**2)) < 0.02 * (vol.data.max() - vol.data.min())


def test_resample_mask_thresholds_occupancy():
    occ = np.zeros((8, 8, 8), bool)
    occ[2:5, 2:5, 2:5] = True
    m = Mask3(occ, (1, 1, 1), (0, 0, 0))
    moved = resample_mask(m, RigidTransform(Quaternion.identity(), (1.0, 0, 0)))
    assert moved.data[3:6, 2:5, 2:5].all() and moved.data.sum() == 27


# -- deformable warp --------------------------------------------------------------


def test_warp_zero_is_identity(blobs32):
    vol, _ = blobs32
    out = warp_deformable(vol, DeformationField.zeros(vol.grid))
    assert np.max(np.abs(out.data - vol.data)) < 1e-12


def test_warp_constant_shift_matches_rigid_translation(rng):
    vol = _vol(rng.random((8, 8, 8)), (2.0, 2.0, 2.0))
    u = np.zeros((3, 8, 8, 8))
    u[0] = -1.0
    warped = warp_deformable(vol, DeformationField(u, vol.grid))
    moved = resample_rigid(vol, RigidTransform(Quaternion.identity(), (2.0, 0, 0)))
    np.testing.assert_allclose(warped.data[1:], moved.data[1:], atol=1e-9)


def test_warp_round_trip_with_numerical_inverse(blobs32):
    vol, _ = blobs32
    g = vol.grid
    idx = g.index_coords()
    n = g.dims[0]
    u = np.zeros((3,) + g.dims)
    u[0] = 0.8 * np.sin(2 * np.pi * idx[1] / n)
    u[1] = 0.6 * np.cos(2 * np.pi * idx[2] / n)
    # fixed-point inverse: w(y) = -u(y + w(y))
    w = np.zeros_like(u)
    for _ in range(50):
        w = -np.stack([sample_trilinear(u[a], idx + w, mode="wrap") for a in range(3)])
    there = warp_deformable(vol, DeformationField(u, g))
    back = warp_deformable(there, DeformationField(w, g))
    err = (back.data - vol.data)[2:-2, 2:-2, 2:-2]
    assert np.sqrt(np.mean(err**2)) < 0.02 * np.ptp(vol.data)


def test_warp_grid_mismatch():
    vol = _vol(np.zeros((4, 4, 4)))
    other = Grid((5, 5, 5), (1, 1, 1), (0, 0, 0))
    with pytest.raises(GridMismatch):
        warp_deformable(vol, DeformationField.zeros(other))


# -- distance transform ---------------------------------------------------------


def test_distance_transform_examples():
    full = Mask3(np.ones((4, 4, 4), bool), (1, 1, 1), (0, 0, 0))
    assert np.all(distance_transform(full).data == 0)
    m = np.zeros((16, 16, 16), bool)
    m[5, 7, 9] = True
    d = distance_transform(Mask3(m, (1, 1, 1), (0, 0, 0))).data
    idx = np.indices(m.shape)
    np.testing.assert_allclose(d, np.sqrt((idx[0] - 5) ** 2 + (idx[1] - 7) ** 2 + (idx[2] - 9) ** 2), atol=1e-9)
    m2 = m.copy()
    m2[12, 2, 3] = True
    single = np.sqrt((idx[0] - 12) ** 2 + (idx[1] - 2) ** 2 + (idx[2] - 3) ** 2)
    d2 = distance_transform(Mask3(m2, (1, 1, 1), (0, 0, 0))).data
    np.testing.assert_allclose(d2, np.minimum(d, single), atol=1e-9)


def test_distance_transform_matches_brute_force(rng):
    for trial in range(100):
        m = rng.random((16, 16, 16)) < rng.uniform(0.001, 0.05)
        if not m.any():
            m[rng.integers(16), rng.integers(16), rng.integers(16)] = True
        spacing = (1.0, 1.0, 1.0) if trial % 2 == 0 else (1.0, 1.5, 2.0)
        d = distance_transform(Mask3(m, spacing, (0, 0, 0))).data
        assert np.max(np.abs(d - _brute_edt(m, np.array(spacing)))) < 1e-9


def test_distance_transform_empty_mask():
    with pytest.raises(EmptyMask):
        distance_transform(Mask3(np.zeros((3, 3, 3), bool), (1, 1, 1), (0, 0, 0)))


def test_inside_distance_and_shape_channel():
    vol, mask = sphere_phantom((24, 24, 24), 2.0, radius_frac=0.3)
    depth = inside_distance(mask).data
    assert np.all(depth[~mask.data] == 0) and depth.max() > 0
    ch = shape_channel(mask)
    assert np.argmax(ch.data) == np.argmax(gaussian_smooth(inside_distance(mask), 4.0).data)


# -- smoothing and normalization -------------------------------------------------


def test_gaussian_smooth_examples():
    vol = _vol(np.full((12, 12, 12), 3.0))
    assert gaussian_smooth(vol, 0.0) is vol
    assert np.max(np.abs(gaussian_smooth(vol, 2.0).data - 3.0)) < 1e-9
    delta = np.zeros((21, 21, 21))
    delta[10, 10, 10] = 1.0
    out = gaussian_smooth(_vol(delta), 2.0).data
    x = np.arange(-8, 9)
    k = np.exp(-0.5 * (x / 2.0) ** 2)
    k /= k.sum()
    assert out[10, 10, 10] == pytest.approx(k[8] ** 3, rel=1e-9)


def test_gaussian_smooth_preserves_interior_mass(rng):
    data = np.zeros((30, 30, 30))
    data[10:20, 10:20, 10:20] = rng.random((10, 10, 10))
    out = gaussian_smooth(_vol(data), 1.5).data
    assert abs(out.sum() - data.sum()) < 1e-6 * data.sum()


def test_normalize_intensity_examples():
    vals = np.arange(101, dtype=float)
    data = np.resize(vals, (101, 1, 1)) * np.ones((101, 2, 2))
    out = normalize_intensity(_vol(data)).data
    p1, p99 = np.percentile(data, [1, 99])
    np.testing.assert_allclose(out, np.clip((data - p1) / (p99 - p1), 0, 1))
    with pytest.raises(ConstantVolume):
        normalize_intensity(_vol(np.full((4, 4, 4), 7.0)))


def test_normalize_nearly_unchanged_for_unit_range(rng):
    data = rng.random((20, 20, 20))
    out = normalize_intensity(_vol(data)).data
    assert np.mean(np.abs(out - data)) < 0.02


# -- keypoints ------------------------------------------------------------------------


def test_band_config_validation():
    with pytest.raises(ValueError):
        KeypointBankConfig(num_channels=3)
    with pytest.raises(ValueError):
        KeypointBankConfig(num_channels=4, percentile_edges=[0, 10, 10, 20, 30])
    cfg = KeypointBankConfig()
    assert cfg.num_channels == 128 and len(cfg.percentile_edges) == 129


def test_band_indicators_partition_a_smoothed_step():
    cfg = KeypointBankConfig(num_channels=8, soft_width=0.1)
    v = np.linspace(0, 1, 201)
    ind = band_indicators(v, cfg)
    assert np.all(ind >= -1e-12)
    total = ind.sum(0)
    lo = cfg.percentile_edges[0] / 100
    assert np.all(total[v <= lo] == 0)
    assert np.all(np.abs(total[v >= lo + cfg.soft_width] - 1) < 1e-12)


def test_keypoints_fast_path_matches_dense_reference():
    vol, _ = blobs_phantom((20, 20, 20), 3.0, seed=2, extent=0.3)
    cfg = KeypointBankConfig(num_channels=16)
    a, b = extract_keypoints(vol, cfg), extract_keypoints_dense(vol, cfg)
    np.testing.assert_allclose(a.points, b.points, atol=1e-9)
    np.testing.assert_allclose(a.weights, b.weights, atol=1e-12)


def test_keypoint_weights_normalized_and_empty_channels_at_center():
    vol, _ = sphere_phantom((24, 24, 24), 2.0)
    k = extract_keypoints(vol, KeypointBankConfig(num_channels=16))
    assert abs(k.weights.sum() - 1.0) < 1e-12
    empty = k.weights == 0
    np.testing.assert_allclose(k.points[empty], np.tile(vol.grid.center, (empty.sum(), 1)))


def test_uniform_ball_centroids_at_center():
    g = Grid((32, 32, 32), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))
    r = np.linalg.norm(g.index_coords() - g.center[:, None, None, None], axis=0)
    ball = np.clip(6.5 - r, 0.0, 1.0)
    k = extract_keypoints(Volume3.on_grid(ball, g), KeypointBankConfig(num_channels=16))
    live = k.weights > 0
    assert live.any()
    assert np.max(np.linalg.norm(k.points[live] - g.center, axis=1)) < 0.1


def test_keypoints_follow_translation(blobs48):
    vol, _ = blobs48
    # whole-voxel shift, so resampling itself adds no blur
    t = np.array([8.0, -4.0, 12.0])
    moved = resample_rigid(vol, RigidTransform(Quaternion.identity(), t))
    a, b = extract_keypoints(vol), extract_keypoints(moved)
    live = (a.weights > 0) & (b.weights > 0)
    err = np.linalg.norm(b.points[live] - (a.points[live] + t), axis=1) / 4.0
    assert np.max(err) < 0.1


def test_keypoints_follow_rotation(blobs48):
    vol, _ = blobs48
    q = RigidTransform.about_pivot(Quaternion.from_axis_angle([0.2, 0.4, 1.0], math.radians(12)), vol.grid.center)
    a, b = extract_keypoints(vol), extract_keypoints(resample_rigid(vol, q))
    live = (a.weights > 1e-6) & (b.weights > 1e-6)
    err = np.linalg.norm(b.points[live] - q.apply(a.points[live]), axis=1) / 4.0
    assert np.sqrt(np.average(err**2, weights=a.weights[live])) < 0.2


def _margin(mask):
    idx = np.argwhere(mask.data)
    return min(idx.min(), (np.array(mask.dims) - 1 - idx.max(0)).min())


@given(st.integers(0, 10_000))
def test_keypoint_equivariance_property(seed):
    vol, mask = blobs_phantom((40, 40, 40), 4.0, seed=seed % 4)
    rng = np.random.default_rng(seed)
    q = RigidTransform.about_pivot(random_rotation(rng, 30.0), vol.grid.center, rng.uniform(-8, 8, 3))
    assume(_margin(resample_mask(mask, q)) >= 5)
    a, b = extract_keypoints(vol), extract_keypoints(resample_rigid(vol, q))
    live = (a.weights > 0) & (b.weights > 0)
    err = np.linalg.norm(b.points[live] - q.apply(a.points[live]), axis=1) / 4.0
    assert np.sqrt(np.mean(err**2)) < 0.25
