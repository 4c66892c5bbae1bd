"""Motion simulation, error metrics, overlap, temporal SNR and run aggregation."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import GridMismatch, MissingCase, TooFewFrames
from .geometry import Quaternion, RigidTransform, rotation_geodesic_angle
from .volume import Mask3, Volume3, resample_rigid

CSV_FIELDS = ("case_id", "regime", "trans_err_mm", "ang_err_deg", "dice", "tsnr_median", "wall_time_s")


@dataclass(frozen=True)
class MotionRegime:
    name: str
    t_max_mm: float
    r_max_deg: float

    def __post_init__(self):
        if self.t_max_mm < 0 or self.r_max_deg < 0:
            raise ValueError("regime bounds must be non-negative")

    def to_dict(self) -> dict:
        return {"name": self.name, "t_max_mm": self.t_max_mm, "r_max_deg": self.r_max_deg}


REGIMES = {
    "small": MotionRegime("small", 10.0, 5.0),
    "medium": MotionRegime("medium", 20.0, 10.0),
    "large": MotionRegime("large", 30.0, 20.0),
}


def get_regime(regime) -> MotionRegime:
    if isinstance(regime, MotionRegime):
        return regime
    try:
        return REGIMES[str(regime)]
    except KeyError:
        raise ValueError(f"unknown regime {regime!r}; expected one of {sorted(REGIMES)}") from None


def sample_motion(regime, pivot, rng: np.random.Generator) -> RigidTransform:
    """Random rigid motion within ``regime``, rotating about ``pivot``.

    Axis uniform on the sphere, angle uniform in [0, r_max], each translation
    component uniform in [-t_max, t_max] (measured at the pivot).
    """
    regime = get_regime(regime)
    axis = rng.normal(size=3)
    while np.linalg.norm(axis) < 1e-12:
        axis = rng.normal(size=3)
    angle = math.radians(rng.uniform(0.0, regime.r_max_deg))
    shift = rng.uniform(-regime.t_max_mm, regime.t_max_mm, size=3)
    return RigidTransform.about_pivot(Quaternion.from_axis_angle(axis, angle), pivot, shift)


def simulate_motion(vol: Volume3, regime, seed: int):
    """Return ``(moved, truth)``; ``moved`` is ``vol`` resampled through ``truth``."""
    truth = sample_motion(regime, vol.grid.center, np.random.default_rng(seed))
    return resample_rigid(vol, truth), truth


def transform_error(pred: RigidTransform, truth: RigidTransform, pivot=(0.0, 0.0, 0.0)) -> tuple[float, float]:
    """``(translation error in mm, angular error in degrees)``.

    Translations are compared where each transform sends ``pivot``, so a pure
    rotation about the pivot shows no translation error.
    """
    trans = float(np.linalg.norm(pred.offset_at(pivot) - truth.offset_at(pivot)))
    return trans, rotation_geodesic_angle(pred, truth)


def dice(a: Mask3, b: Mask3) -> float:
    """Overlap 2|A&B| / (|A| + |B|); two empty masks count as a perfect match."""
    if not a.grid.congruent(b.grid):
        raise GridMismatch("dice needs masks on the same grid")
    na, nb = int(a.data.sum()), int(b.data.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a.data, b.data).sum()) / (na + nb)


def tsnr(series, return_mask: bool = False):
    """Voxelwise temporal mean over population standard deviation.

    Voxels whose standard deviation is below 1e-12 are set to 0; with
    ``return_mask`` the mask of those stable voxels is returned too.
    """
    series = list(series)
    if len(series) < 3:
        raise TooFewFrames(f"tSNR needs at least 3 frames, got {len(series)}")
    grid = series[0].grid
    for v in series[1:]:
        if not v.grid.congruent(grid):
            raise GridMismatch("all frames must share one grid")
    stack = np.stack([v.data for v in series])
    mean = stack.mean(axis=0)
    std = stack.std(axis=0)
    stable = std < 1e-12
    out = np.where(stable, 0.0, mean / np.where(stable, 1.0, std))
    vol = Volume3.on_grid(out, grid)
    if return_mask:
        return vol, Mask3.on_grid(stable, grid)
    return vol


def tsnr_median(series, roi: Mask3 | None = None) -> float:
    """Median tSNR over ``roi`` (all voxels when omitted), skipping zero-std voxels."""
    vol, stable = tsnr(series, return_mask=True)
    keep = ~stable.data
    if roi is not None:
        keep &= roi.data
    vals = vol.data[keep]
    return float(np.median(vals)) if vals.size else 0.0


# -- aggregation ---------------------------------------------------------------


@dataclass(frozen=True)
class CaseResult:
    """One prediction to score. ``pivot`` defaults to the world origin."""

    transform: RigidTransform
    regime: str = ""
    pred_mask: Mask3 | None = None
    pivot: tuple = (0.0, 0.0, 0.0)
    tsnr_median: float | None = None
    wall_time_s: float | None = None


def _stats(values) -> dict:
    arr = np.asarray([v for v in values if v is not None and not (isinstance(v, float) and math.isnan(v))],
                     dtype=float)
    if arr.size == 0:
        return {"n": 0, "mean": None, "std": None, "median": None}
    return {"n": int(arr.size), "mean": float(arr.mean()), "std": float(arr.std()),
            "median": float(np.median(arr))}


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)
    unmatched: list = field(default_factory=list)

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    @property
    def trans_err_mm(self) -> float | None:
        return _stats(self.column("trans_err_mm"))["median"]

    @property
    def ang_err_deg(self) -> float | None:
        return _stats(self.column("ang_err_deg"))["median"]

    @property
    def dice(self) -> float | None:
        return _stats(self.column("dice"))["median"]

    @property
    def tsnr_mean(self) -> float | None:
        return _stats(self.column("tsnr_median"))["mean"]

    def summary(self) -> dict:
        out = {}
        for name in ("trans_err_mm", "ang_err_deg", "dice", "tsnr_median", "wall_time_s"):
            out[name] = _stats(self.column(name))
        by_regime = {}
        for reg in sorted({r["regime"] for r in self.rows}):
            sub = [r for r in self.rows if r["regime"] == reg]
            by_regime[reg] = {n: _stats([r[n] for r in sub]) for n in ("trans_err_mm", "ang_err_deg", "dice")}
        out["by_regime"] = by_regime
        return out

    def to_dict(self) -> dict:
        return {"rows": self.rows, "summary": self.summary(), "unmatched": self.unmatched}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: ("" if r[k] is None else r[k]) for k in CSV_FIELDS})
        return buf.getvalue()

    def write(self, prefix) -> tuple[Path, Path]:
        prefix = Path(prefix)
        csv_path = prefix.with_name(prefix.name + ".csv")
        json_path = prefix.with_name(prefix.name + ".json")
        csv_path.write_text(self.to_csv())
        json_path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return csv_path, json_path

    def figure_series(self) -> dict:
        """Per-regime error lists for external plotting."""
        out = {}
        for r in self.rows:
            s = out.setdefault(r["regime"] or "all", {"case_id": [], "trans_err_mm": [], "ang_err_deg": [], "dice": []})
            for k in s:
                s[k].append(r[k])
        return out


def evaluate_run(results: dict, truths: dict, masks: dict | None = None) -> MetricReport:
    """Score predictions against ground truth, joined by case id.

    ``results`` maps case id to :class:`CaseResult`; ``truths`` maps case id
    to the applied :class:`RigidTransform`; ``masks`` optionally maps case id
    to the reference mask scored against ``CaseResult.pred_mask``. Rows are
    ordered by case id.
    """
    masks = masks or {}
    common = sorted(set(results) & set(truths), key=str)
    if not common:
        raise MissingCase("no case ids are shared between results and truths")
    unmatched = sorted(set(results) ^ set(truths), key=str)
    rows = []
    for cid in common:
        res = results[cid]
        if not isinstance(res, CaseResult):
            res = CaseResult(res)
        trans, ang = transform_error(res.transform, truths[cid], res.pivot)
        d = None
        if res.pred_mask is not None and cid in masks:
            d = dice(res.pred_mask, masks[cid])
        rows.append({
            "case_id": str(cid),
            "regime": res.regime,
            "trans_err_mm": trans,
            "ang_err_deg": ang,
            "dice": d,
            "tsnr_median": res.tsnr_median,
            "wall_time_s": res.wall_time_s,
        })
    return MetricReport(rows, [str(u) for u in unmatched])
