import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mocoreg.errors import GridMismatch, MissingCase, TooFewFrames
from mocoreg.evaluation import (
    CSV_FIELDS,
    REGIMES,
    CaseResult,
    MotionRegime,
    dice,
    evaluate_run,
    get_regime,
    sample_motion,
    simulate_motion,
    transform_error,
    tsnr,
    tsnr_median,
)
from mocoreg.geometry import Quaternion, RigidTransform, rotation_geodesic_angle
from mocoreg.volume import Mask3, Volume3, resample_rigid


def _mask(data):
    return Mask3(np.asarray(data, bool), (1, 1, 1), (0, 0, 0))


def _vol(data):
    return Volume3(np.asarray(data, float), (1, 1, 1), (0, 0, 0))


# -- regimes and simulation -----------------------------------------------------


def test_regime_constants():
    assert (REGIMES["small"].t_max_mm, REGIMES["small"].r_max_deg) == (10.0, 5.0)
    assert (REGIMES["medium"].t_max_mm, REGIMES["medium"].r_max_deg) == (20.0, 10.0)
    assert (REGIMES["large"].t_max_mm, REGIMES["large"].r_max_deg) == (30.0, 20.0)
    with pytest.raises(ValueError):
        get_regime("huge")


def test_sampled_motion_respects_bounds_over_many_seeds():
    pivot = np.array([10.0, 20.0, 30.0])
    ident = RigidTransform.identity()
    for name, reg in REGIMES.items():
        for seed in range(10_000 // 3 + 1):
            q = sample_motion(reg, pivot, np.random.default_rng(seed))
            assert np.max(np.abs(q.offset_at(pivot))) <= reg.t_max_mm
            assert rotation_geodesic_angle(q, ident) <= reg.r_max_deg + 1e-9


def test_zero_regime_is_identity(blobs32):
    vol, _ = blobs32
    moved, truth = simulate_motion(vol, MotionRegime("none", 0.0, 0.0), seed=3)
    assert transform_error(truth, RigidTransform.identity(), vol.grid.center) == (0.0, 0.0)
    np.testing.assert_array_equal(moved.data, resample_rigid(vol, truth).data)


def test_simulation_is_deterministic(blobs32):
    vol, _ = blobs32
    a, ta = simulate_motion(vol, "medium", seed=7)
    b, tb = simulate_motion(vol, "medium", seed=7)
    assert np.array_equal(a.data, b.data)
    assert ta.homogeneous().tolist() == tb.homogeneous().tolist()
    c, _ = simulate_motion(vol, "medium", seed=8)
    assert not np.array_equal(a.data, c.data)


# -- transform error --------------------------------------------------------------


def test_transform_error_examples():
    pivot = np.array([5.0, 5.0, 5.0])
    truth = RigidTransform.about_pivot(Quaternion.from_axis_angle([1, 1, 0], 0.3), pivot, (1, 2, 3))
    assert transform_error(truth, truth, pivot) == (0.0, 0.0)
    extra = RigidTransform.about_pivot(Quaternion.from_axis_angle([0, 0, 1], math.radians(2)), truth.apply(pivot))
    trans, ang = transform_error(extra.compose(truth), truth, pivot)
    assert trans == pytest.approx(0.0, abs=1e-12) and ang == pytest.approx(2.0, abs=1e-9)
    shifted = RigidTransform(truth.rotation, truth.translation + [3.0, 0, 0])
    trans, ang = transform_error(shifted, truth, pivot)
    assert trans == pytest.approx(3.0, abs=1e-12) and ang == 0.0


def _rigid(draw_axis, deg, t):
    return RigidTransform.from_axis_angle(draw_axis, deg, t)


axes = st.tuples(st.floats(0.1, 1), st.floats(-1, 1), st.floats(-1, 1))
vecs = st.tuples(*(st.floats(-50, 50),) * 3)


@given(axes, st.floats(0, 180), vecs, axes, st.floats(0, 180), vecs)
def test_transform_error_is_symmetric_and_zero_on_equal(a1, d1, t1, a2, d2, t2):
    p, q = _rigid(a1, d1, t1), _rigid(a2, d2, t2)
    pivot = (3.0, -2.0, 7.0)
    e1, e2 = transform_error(p, q, pivot), transform_error(q, p, pivot)
    assert e1[0] == pytest.approx(e2[0], abs=1e-12) and e1[1] == pytest.approx(e2[1], abs=1e-9)
    assert e1[0] >= 0 and e1[1] >= 0
    assert transform_error(p, p, pivot) == (0.0, 0.0)


# -- dice ---------------------------------------------------------------------------


def test_dice_examples():
    a = np.zeros((10, 10, 10), bool)
    b = np.zeros((10, 10, 10), bool)
    a[0, :, :] = True  # 100 voxels
    assert dice(_mask(a), _mask(a)) == 1.0
    b[5, :, :] = True
    assert dice(_mask(a), _mask(b)) == 0.0
    c = np.zeros_like(a)
    c[0, :5, :] = True
    c[1, :5, :] = True  # 100 voxels, 50 shared with a
    assert dice(_mask(a), _mask(c)) == 0.5
    empty = _mask(np.zeros((10, 10, 10)))
    assert dice(empty, empty) == 1.0
    with pytest.raises(GridMismatch):
        dice(_mask(a), _mask(np.zeros((5, 5, 5))))


@given(st.integers(0, 2**31 - 1))
def test_dice_properties(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((6, 6, 6)) < rng.uniform(0, 1)
    b = rng.random((6, 6, 6)) < rng.uniform(0, 1)
    d = dice(_mask(a), _mask(b))
    assert 0.0 <= d <= 1.0
    assert d == dice(_mask(b), _mask(a))
    assert (d == 1.0) == np.array_equal(a, b)


# -- tSNR -------------------------------------------------------------------------


def test_tsnr_examples():
    frames = [_vol(np.full((3, 3, 3), v)) for v in (9.0, 10.0, 11.0)]
    np.testing.assert_allclose(tsnr(frames).data, 10.0 / math.sqrt(2.0 / 3.0), rtol=1e-12)
    same = [_vol(np.full((3, 3, 3), 4.0))] * 3
    out, stable = tsnr(same, return_mask=True)
    assert np.all(out.data == 0) and stable.data.all()
    with pytest.raises(TooFewFrames):
        tsnr(frames[:2])


def test_doubling_noise_halves_tsnr():
    rng = np.random.default_rng(0)
    base = np.full((16, 16, 16), 100.0)
    one = [_vol(base + rng.normal(0, 1.0, base.shape)) for _ in range(30)]
    two = [_vol(base + rng.normal(0, 2.0, base.shape)) for _ in range(30)]
    ratio = tsnr_median(two) / tsnr_median(one)
    assert abs(ratio - 0.5) <= 0.05


# -- aggregation ------------------------------------------------------------------


def test_evaluate_perfect_case():
    q = RigidTransform.from_axis_angle([0, 1, 0], 10, (1, 2, 3))
    m = _mask(np.ones((4, 4, 4)))
    rep = evaluate_run({"a": CaseResult(q, "small", m)}, {"a": q}, {"a": m})
    row = rep.rows[0]
    assert (row["trans_err_mm"], row["ang_err_deg"], row["dice"]) == (0.0, 0.0, 1.0)


def test_evaluate_aggregates():
    ident = RigidTransform.identity()
    res = {
        "c1": CaseResult(RigidTransform.from_axis_angle([0, 0, 1], 1.0), "medium"),
        "c2": CaseResult(RigidTransform.from_axis_angle([0, 0, 1], 3.0), "medium"),
        "extra": CaseResult(ident),
    }
    rep = evaluate_run(res, {"c1": ident, "c2": ident})
    s = rep.summary()["ang_err_deg"]
    assert s["mean"] == pytest.approx(2.0) and s["median"] == pytest.approx(2.0)
    assert rep.unmatched == ["extra"]
    assert [r["case_id"] for r in rep.rows] == ["c1", "c2"]


def test_evaluate_missing_case():
    with pytest.raises(MissingCase):
        evaluate_run({"a": CaseResult(RigidTransform.identity())}, {"b": RigidTransform.identity()})


def test_csv_schema(tmp_path):
    q = RigidTransform.identity()
    rep = evaluate_run({"x": CaseResult(q, "large", wall_time_s=1.5)}, {"x": q})
    rows = list(csv.DictReader(io.StringIO(rep.to_csv())))
    assert tuple(rows[0].keys()) == CSV_FIELDS
    assert rows[0]["wall_time_s"] == "1.5" and rows[0]["dice"] == ""
    csv_path, json_path = rep.write(tmp_path / "report")
    assert csv_path.read_text() == rep.to_csv() and json_path.exists()
    assert set(rep.figure_series()) == {"large"}
