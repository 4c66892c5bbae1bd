import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mocoreg.errors import DegenerateConfiguration
from mocoreg.geometry import (
    PointCorrespondence,
    Quaternion,
    RigidTransform,
    apply_to_point,
    compose,
    inverse,
    kabsch_solve,
    random_rotation,
    rotation_geodesic_angle,
    slerp_fuse,
    weighted_residual,
)

unit = st.floats(-1.0, 1.0, allow_nan=False)
angle = st.floats(0.0, 180.0, allow_nan=False)
shift = st.floats(-100.0, 100.0, allow_nan=False)
lam = st.floats(0.0, 1.0, allow_nan=False)


@st.composite
def transforms(draw):
    axis = np.array([draw(unit), draw(unit), draw(unit)])
    if np.linalg.norm(axis) < 1e-3:
        axis = np.array([0.0, 0.0, 1.0])
    return RigidTransform.from_axis_angle(axis, draw(angle), [draw(shift), draw(shift), draw(shift)])


def _rot_z(deg, t=(0.0, 0.0, 0.0)):
    return RigidTransform.from_axis_angle([0, 0, 1], deg, t)


def _axis_angle_matrix(axis, deg):
    # Rodrigues, independent of the quaternion path
    k = np.asarray(axis, float) / np.linalg.norm(axis)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    a = math.radians(deg)
    return np.eye(3) + math.sin(a) * kx + (1 - math.cos(a)) * kx @ kx


# -- quaternion / transform algebra ---------------------------------------------


def test_canonical_quaternion_sign():
    q = Quaternion(-0.5, 0.5, 0.5, 0.5).canonical()
    assert q.w > 0
    tie = Quaternion(0.0, 0.0, -1.0, 0.0).canonical()
    assert tie.as_array().tolist() == [0.0, 0.0, 1.0, 0.0]


def test_matrix_matches_rodrigues():
    for axis, deg in [([1, 2, 3], 37.0), ([0, 0, 1], 90.0), ([1, -1, 0], 179.0)]:
        m = RigidTransform.from_axis_angle(axis, deg).matrix
        np.testing.assert_allclose(m, _axis_angle_matrix(axis, deg), atol=1e-12)


def test_apply_examples():
    np.testing.assert_array_equal(apply_to_point(RigidTransform.identity(), [1, 2, 3]), [1, 2, 3])
    np.testing.assert_allclose(apply_to_point(_rot_z(90), [1, 0, 0]), [0, 1, 0], atol=1e-12)


def test_compose_with_inverse_on_random_points(rng):
    q = RigidTransform(random_rotation(rng), rng.uniform(-50, 50, 3))
    pts = rng.uniform(-100, 100, (100, 3))
    back = compose(q, inverse(q)).apply(pts)
    assert np.max(np.abs(back - pts)) < 1e-9


@given(transforms(), transforms(), transforms())
def test_composition_is_associative(a, b, c):
    left = a.compose(b).compose(c)
    right = a.compose(b.compose(c))
    np.testing.assert_allclose(left.homogeneous(), right.homogeneous(), atol=1e-9)


@given(transforms())
def test_rotation_matrix_is_proper(q):
    r = q.matrix
    np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-10)
    assert abs(np.linalg.det(r) - 1.0) < 1e-10
    assert abs(q.rotation.norm() - 1.0) < 1e-12


@given(transforms())
def test_json_round_trip(q):
    back = RigidTransform.from_json(q.to_json())
    np.testing.assert_allclose(back.homogeneous(), q.homogeneous(), atol=1e-12)


def test_json_rejects_inconsistent_matrix():
    d = _rot_z(30, (1, 2, 3)).to_dict()
    d["matrix"][3] += 1e-6
    with pytest.raises(ValueError):
        RigidTransform.from_dict(json.loads(json.dumps(d)))


# -- geodesic angle ------------------------------------------------------------


def test_geodesic_angle_examples():
    ident = RigidTransform.identity()
    assert rotation_geodesic_angle(ident, ident) == 0.0
    assert rotation_geodesic_angle(ident, _rot_z(90)) == pytest.approx(90.0, abs=1e-12)
    assert rotation_geodesic_angle(ident, _rot_z(30).compose(_rot_z(30))) == pytest.approx(60.0, abs=1e-10)


@given(transforms(), transforms())
def test_geodesic_angle_matches_trace_formula(a, b):
    # independent oracle: angle of R_a^T R_b from its trace
    r = a.matrix.T @ b.matrix
    ref = math.degrees(math.acos(np.clip((np.trace(r) - 1) / 2, -1, 1)))
    got = rotation_geodesic_angle(a, b)
    assert 0.0 <= got <= 180.0
    assert got == pytest.approx(ref, abs=1e-5)
    assert rotation_geodesic_angle(b, a) == pytest.approx(got, abs=1e-12)


# -- Kabsch ----------------------------------------------------------------------


def test_kabsch_identity_on_cube():
    corners = np.array(list(itertools.product([0.0, 1.0], repeat=3)))
    q, rep = kabsch_solve(PointCorrespondence.uniform(corners, corners))
    np.testing.assert_allclose(q.homogeneous(), np.eye(4), atol=1e-12)
    assert rep.residual_rms < 1e-12
    assert not rep.reflection_corrected


def test_kabsch_recovers_known_transform():
    corners = np.array(list(itertools.product([-1.0, 1.0], repeat=3))) * 10
    truth = _rot_z(90, (5, 0, 0))
    q, rep = kabsch_solve(PointCorrespondence.uniform(corners, truth.apply(corners)))
    np.testing.assert_allclose(q.matrix, truth.matrix, atol=1e-9)
    np.testing.assert_allclose(q.translation, truth.translation, atol=1e-9)
    assert list(rep.singular_values) == sorted(rep.singular_values, reverse=True)


def test_kabsch_mirror_case_is_proper_and_optimal():
    src = np.array([[0, 0, 0], [1, 0, 0], [0, 2, 0], [0, 0, 3]], dtype=float) + [1.0, 0.5, 0.25]
    tgt = src * [-1, 1, 1]
    corr = PointCorrespondence.uniform(src, tgt)
    q, rep = kabsch_solve(corr)
    assert rep.reflection_corrected
    assert abs(np.linalg.det(q.matrix) - 1.0) < 1e-12
    assert rep.residual_rms > 0
    # no rotation on a 5-degree grid (Euler angles) reaches zero residual,
    # and none beats the closed form
    best = np.inf
    tc = tgt.mean(0)
    grid = np.radians(np.arange(0, 360, 5.0))
    cz, sz = np.cos(grid), np.sin(grid)
    s0 = src - src.mean(0)
    t0 = tgt - tc
    for b in np.radians(np.arange(0, 181, 5.0)):
        cb, sb = math.cos(b), math.sin(b)
        for i in range(len(grid)):
            rz1 = np.array([[cz[i], -sz[i], 0], [sz[i], cz[i], 0], [0, 0, 1]])
            ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
            m = rz1 @ ry
            # the last z rotation is vectorized over the grid
            rot = np.einsum("kij,jl->kil", np.stack([np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]]) for c, s in zip(cz, sz)]), m)
            d = np.einsum("kij,nj->kni", rot, s0) - t0[None]
            best = min(best, float(np.min(np.mean(np.sum(d * d, axis=2), axis=1))))
    assert best > 1e-3
    assert rep.residual_rms ** 2 <= best + 1e-12


def test_kabsch_degenerate_collinear():
    src = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], dtype=float)
    with pytest.raises(DegenerateConfiguration) as info:
        kabsch_solve(PointCorrespondence.uniform(src, src + 1.0))
    assert len(info.value.singular_values) == 3


def test_correspondence_validation():
    pts = np.zeros((3, 3))
    with pytest.raises(ValueError):
        PointCorrespondence(pts[:2], pts[:2], [0.5, 0.5])
    with pytest.raises(ValueError):
        PointCorrespondence(pts, pts, [1.0, -1.0, 1.0])
    corr = PointCorrespondence(pts, pts, [1.0, 2.0, 1.0])
    assert abs(corr.weights.sum() - 1.0) < 1e-12


@given(transforms(), st.integers(4, 12), st.integers(0, 2**31 - 1))
def test_kabsch_exact_on_noise_free_points(truth, n, seed):
    pts = np.random.default_rng(seed).uniform(-50, 50, (n, 3))
    q, _ = kabsch_solve(PointCorrespondence.uniform(pts, truth.apply(pts)))
    assert rotation_geodesic_angle(q, truth) < 1e-8
    assert np.linalg.norm(q.translation - truth.translation) < 1e-8


def _small_rotations():
    axes = [np.array(v, float) for v in itertools.product([-1, 0, 1], repeat=3) if any(v)]
    return [RigidTransform.from_axis_angle(a, 0.1) for a in axes]


@given(st.integers(0, 2**31 - 1))
def test_kabsch_is_a_local_minimum(seed):
    rng = np.random.default_rng(seed)
    src = rng.uniform(-20, 20, (8, 3))
    tgt = RigidTransform(random_rotation(rng), rng.uniform(-10, 10, 3)).apply(src) + rng.normal(0, 1.0, (8, 3))
    corr = PointCorrespondence(src, tgt, rng.uniform(0.1, 1.0, 8))
    q, _ = kabsch_solve(corr)
    base = weighted_residual(corr, q)
    pivot = corr.weights @ src
    for d in _small_rotations():
        # rotate about the source centroid so the translation stays optimal
        p = q.compose(RigidTransform.about_pivot(d.rotation, pivot))
        assert weighted_residual(corr, p) >= base - 1e-9


# -- SLERP fusion --------------------------------------------------------------


def test_slerp_boundaries_exact():
    a, b = _rot_z(10, (1, 2, 3)), RigidTransform.from_axis_angle([1, 1, 0], 70, (-4, 0, 9))
    assert slerp_fuse(a, b, 0.0) is a
    assert slerp_fuse(a, b, 1.0) is b


def test_slerp_half_way_example():
    out = slerp_fuse(RigidTransform.identity(), _rot_z(90, (10, 0, 0)), 0.5)
    # oracle: axis-angle halving of the 90 degree rotation
    np.testing.assert_allclose(out.matrix, _axis_angle_matrix([0, 0, 1], 45.0), atol=1e-12)
    np.testing.assert_allclose(out.translation, [5, 0, 0], atol=1e-12)


def test_slerp_rejects_out_of_range():
    with pytest.raises(ValueError):
        slerp_fuse(RigidTransform.identity(), RigidTransform.identity(), 1.5)


@given(transforms(), transforms(), lam)
def test_slerp_geodesic_proportionality(a, b, w):
    full = rotation_geodesic_angle(a, b)
    part = rotation_geodesic_angle(a, slerp_fuse(a, b, w))
    assert abs(part - w * full) < 1e-7


@given(transforms(), transforms(), lam)
def test_slerp_hemisphere_invariance(a, b, w):
    flipped = RigidTransform(-b.rotation, b.translation)
    x = slerp_fuse(a, b, w)
    y = slerp_fuse(a, flipped, w)
    if w == 1.0:
        np.testing.assert_allclose(x.homogeneous(), y.homogeneous(), atol=1e-12)
    else:
        assert x.rotation.as_array().tolist() == y.rotation.as_array().tolist()
        assert x.translation.tolist() == y.translation.tolist()


@given(transforms(), lam)
def test_slerp_near_antipodal_stays_proper(a, w):
    b = a.compose(RigidTransform.from_axis_angle([0.3, -1, 0.2], 180.0 - 1e-6))
    r = slerp_fuse(a, b, w).matrix
    np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-10)
    assert abs(np.linalg.det(r) - 1.0) < 1e-10
