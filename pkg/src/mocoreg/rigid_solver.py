"""Rigid estimation from keypoint banks, modality fusion and refinement."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConstantVolume, GridMismatch, TooFewChannels
from .geometry import (
    KabschReport,
    PointCorrespondence,
    RigidTransform,
    kabsch_solve,
    rotation_geodesic_angle,
    slerp_fuse,
)
from .volume import (
    KeypointBankConfig,
    Mask3,
    Volume3,
    apply_window,
    extract_keypoints,
    gaussian_smooth,
    intensity_window,
    normalize_intensity,
    resample_rigid,
    shape_channel,
)

log = logging.getLogger(__name__)

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
NORMALIZE_MODES = ("range", "separate", "joint", "none")


@dataclass(frozen=True, eq=False)
class ModalityPair:
    """Source/target images plus optional shape channels on one grid."""

    source_image: Volume3
    target_image: Volume3
    source_shape: Volume3 | None = None
    target_shape: Volume3 | None = None
    source_mask: Mask3 | None = None
    target_mask: Mask3 | None = None
    tags: dict = field(default_factory=dict)

    def __post_init__(self):
        grid = self.source_image.grid
        others = [self.target_image, self.source_shape, self.target_shape, self.source_mask, self.target_mask]
        for v in others:
            if v is not None and not v.grid.congruent(grid):
                raise GridMismatch("all volumes of a modality pair must share one grid")
        if (self.source_shape is None) != (self.target_shape is None):
            raise ValueError("shape channels must be given for both source and target, or neither")

    @property
    def has_shape(self) -> bool:
        return self.source_shape is not None

    @property
    def grid(self):
        return self.source_image.grid

    @classmethod
    def build(cls, source: Volume3, target: Volume3, source_mask: Mask3 | None = None,
              target_mask: Mask3 | None = None, normalize: str = "range", shape_sigma_vox: float = 2.0,
              smooth_mm: float = 0.0, tags: dict | None = None) -> "ModalityPair":
        """Normalize intensities and derive shape channels from masks when both are given.

        ``normalize`` is one of: "range", where the source's [p1, max] is
        mapped onto [0, 1] for both volumes; "separate", where each volume gets
        its own [p1, p99] percentile window; "joint", where the source's
        percentile window is applied to both; or "none". ``smooth_mm`` > 0
        Gaussian-smooths both images first, which damps the pose-dependent
        blur that interpolation leaves in already resampled frames.
        Shape channels are distances in mm, so they always share the
        source window unless ``normalize`` is "none".
        """
        if normalize not in NORMALIZE_MODES:
            raise ValueError(f"normalize must be one of {NORMALIZE_MODES}, got {normalize!r}")
        if smooth_mm > 0:
            source, target = gaussian_smooth(source, smooth_mm), gaussian_smooth(target, smooth_mm)
        if normalize == "separate":
            source, target = normalize_intensity(source), normalize_intensity(target)
        elif normalize == "range":
            win = (float(np.percentile(source.data, 1.0)), float(source.data.max()))
            if win[1] - win[0] < 1e-12:
                raise ConstantVolume("source volume is constant")
            source, target = apply_window(source, win), apply_window(target, win)
        elif normalize == "joint":
            win = intensity_window(source)
            source, target = apply_window(source, win), apply_window(target, win)
        ss = ts = None
        if source_mask is not None and target_mask is not None:
            ss = shape_channel(source_mask, shape_sigma_vox)
            ts = shape_channel(target_mask, shape_sigma_vox)
            win = (0.0, max(float(ss.data.max()), 1e-12))
            ss, ts = apply_window(ss, win), apply_window(ts, win)
        return cls(source, target, ss, ts, source_mask, target_mask, dict(tags or {}))

    def channels(self):
        out = [(self.source_image, self.target_image)]
        if self.has_shape:
            out.append((self.source_shape, self.target_shape))
        return out


@dataclass(frozen=True)
class FusionWeight:
    lam: float = 0.5
    mode: str = "fixed"

    def __post_init__(self):
        if self.mode not in ("fixed", "auto"):
            raise ValueError(f"fusion mode must be 'fixed' or 'auto', got {self.mode!r}")
        object.__setattr__(self, "lam", float(min(max(self.lam, 0.0), 1.0)))


@dataclass(frozen=True)
class RigidSettings:
    keypoints: KeypointBankConfig = field(default_factory=KeypointBankConfig)
    max_iters: int = 20
    tol_deg: float = 0.01
    tol_mm: float = 0.01
    auto_evaluations: int = 30
    image_weight: float = 1.0
    shape_weight: float = 1.0
    regularization_beta: float = 0.0

    def to_dict(self) -> dict:
        return {
            "keypoints": self.keypoints.to_dict(),
            "max_iters": self.max_iters,
            "tol_deg": self.tol_deg,
            "tol_mm": self.tol_mm,
            "auto_evaluations": self.auto_evaluations,
            "image_weight": self.image_weight,
            "shape_weight": self.shape_weight,
            "regularization_beta": self.regularization_beta,
        }


@dataclass(eq=False)
class RigidSolveReport:
    q_image: RigidTransform
    q_shape: RigidTransform | None
    q_fused: RigidTransform
    lam_used: float
    iterations: int = 0
    final_loss: float = float("nan")
    kabsch_reports: dict = field(default_factory=dict)
    loss_trace: list = field(default_factory=list)
    lam_trace: list = field(default_factory=list)
    converged: bool = False

    def to_dict(self) -> dict:
        return {
            "q_image": self.q_image.to_dict(),
            "q_shape": None if self.q_shape is None else self.q_shape.to_dict(),
            "q_fused": self.q_fused.to_dict(),
            "lambda": self.lam_used,
            "iterations": self.iterations,
            "final_loss": self.final_loss,
            "kabsch": {k: v.to_dict() for k, v in self.kabsch_reports.items()},
            "loss_trace": [float(x) for x in self.loss_trace],
            "lambda_search": [[float(a), float(b)] for a, b in self.lam_trace],
            "converged": self.converged,
        }


def estimate_rigid_single(source: Volume3, target: Volume3,
                          cfg: KeypointBankConfig | None = None) -> tuple[RigidTransform, KabschReport]:
    """Closed-form transform moving ``source`` onto ``target`` from matched keypoint channels."""
    if not source.grid.congruent(target.grid):
        raise GridMismatch("source and target are on different grids")
    cfg = cfg or KeypointBankConfig()
    ks = extract_keypoints(source, cfg)
    kt = extract_keypoints(target, cfg)
    w = np.minimum(ks.weights, kt.weights)
    keep = w > 0
    if keep.sum() < 3:
        raise TooFewChannels(f"only {int(keep.sum())} keypoint channels are populated in both volumes")
    corr = PointCorrespondence(ks.points[keep], kt.points[keep], w[keep])
    return kabsch_solve(corr)


def alignment_loss(pair: ModalityPair, q: RigidTransform, settings: RigidSettings | None = None) -> float:
    """Weighted sum over channels of the Frobenius norm of ``S o Q - T``."""
    settings = settings or RigidSettings()
    total = 0.0
    weights = [settings.image_weight, settings.shape_weight]
    for wgt, (src, tgt) in zip(weights, pair.channels()):
        moved = resample_rigid(src, q, tgt.grid)
        total += wgt * float(np.sqrt(np.sum((moved.data - tgt.data) ** 2)))
    if settings.regularization_beta:
        total += settings.regularization_beta * float(np.sum(q.offset_at(pair.grid.center) ** 2))
    return total


def _golden_section(f, evaluations: int):
    """Minimize ``f`` on [0, 1] with endpoints included; returns (best_x, best_f, trace)."""
    trace = []

    def ev(x):
        y = f(x)
        trace.append((x, y))
        return y

    ev(0.0)
    ev(1.0)
    a, b = 0.0, 1.0
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = ev(c), ev(d)
    while len(trace) < evaluations:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = ev(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = ev(d)
    best = min(trace, key=lambda t: (t[1], t[0]))
    return best[0], best[1], trace


def fuse_modalities(pair: ModalityPair, weight: FusionWeight | None = None,
                    settings: RigidSettings | None = None) -> RigidSolveReport:
    """Image and shape estimates fused along the rotation geodesic."""
    weight = weight or FusionWeight()
    settings = settings or RigidSettings()
    q_i, rep_i = estimate_rigid_single(pair.source_image, pair.target_image, settings.keypoints)
    reports = {"image": rep_i}
    if not pair.has_shape:
        return RigidSolveReport(q_i, None, q_i, 0.0, kabsch_reports=reports,
                                final_loss=alignment_loss(pair, q_i, settings))
    q_g, rep_g = estimate_rigid_single(pair.source_shape, pair.target_shape, settings.keypoints)
    reports["shape"] = rep_g
    lam_trace = []
    if weight.mode == "auto":
        lam, loss, lam_trace = _golden_section(
            lambda x: alignment_loss(pair, slerp_fuse(q_i, q_g, x), settings), settings.auto_evaluations
        )
    else:
        lam = weight.lam
        loss = alignment_loss(pair, slerp_fuse(q_i, q_g, lam), settings)
    return RigidSolveReport(q_i, q_g, slerp_fuse(q_i, q_g, lam), lam, kabsch_reports=reports,
                            final_loss=loss, lam_trace=lam_trace)


def _residuals(pair: ModalityPair, q: RigidTransform, lam: float, settings: RigidSettings) -> list:
    """Candidate residual transforms: fused first, then each channel alone."""
    moved = resample_rigid(pair.source_image, q, pair.target_image.grid)
    r_i, _ = estimate_rigid_single(moved, pair.target_image, settings.keypoints)
    if not pair.has_shape:
        return [r_i]
    moved_g = resample_rigid(pair.source_shape, q, pair.target_shape.grid)
    r_g, _ = estimate_rigid_single(moved_g, pair.target_shape, settings.keypoints)
    fused = slerp_fuse(r_i, r_g, lam)
    out = [fused]
    for r in (r_i, r_g):
        if r is not fused:
            out.append(r)
    return out


def refine_rigid(pair: ModalityPair, initial: RigidTransform, max_iters: int | None = None,
                 tol_deg: float | None = None, tol_mm: float | None = None, lam: float = 0.0,
                 settings: RigidSettings | None = None, base: RigidSolveReport | None = None) -> RigidSolveReport:
    """Re-estimate residual motion on the resampled source until it vanishes.

    Each iteration resamples the source by the current transform, estimates
    the residual from fresh keypoints and composes it on the left. With shape
    channels present the fused residual competes with the image-only and
    shape-only residuals, and the one giving the lowest alignment loss is
    taken. If even that raises the loss it is rejected and the loop stops, so
    the accepted loss sequence never increases. Residual translations are
    measured at the grid center.
    """
    settings = settings or RigidSettings()
    max_iters = settings.max_iters if max_iters is None else int(max_iters)
    tol_deg = settings.tol_deg if tol_deg is None else tol_deg
    tol_mm = settings.tol_mm if tol_mm is None else tol_mm
    center = pair.grid.center
    ident = RigidTransform.identity()
    q = initial
    loss = alignment_loss(pair, q, settings)
    trace = [loss]
    iters = 0
    converged = False
    for _ in range(max_iters):
        try:
            cands = _residuals(pair, q, lam, settings)
        except TooFewChannels:
            log.warning("refinement stopped: too few keypoint channels after resampling")
            break
        scored = [(alignment_loss(pair, r.compose(q), settings), i, r) for i, r in enumerate(cands)]
        cand_loss, _, res = min(scored, key=lambda t: (t[0], t[1]))
        small = (rotation_geodesic_angle(res, ident) < tol_deg
                 and float(np.linalg.norm(res.offset_at(center))) < tol_mm)
        iters += 1
        if cand_loss > loss:
            converged = small
            break
        q, loss = res.compose(q), cand_loss
        trace.append(loss)
        if small:
            converged = True
            break
    return RigidSolveReport(
        q_image=base.q_image if base else initial,
        q_shape=base.q_shape if base else None,
        q_fused=q,
        lam_used=lam,
        iterations=iters,
        final_loss=loss,
        kabsch_reports=dict(base.kabsch_reports) if base else {},
        loss_trace=trace,
        lam_trace=list(base.lam_trace) if base else [],
        converged=converged,
    )


def rigid_register(pair: ModalityPair, weight: FusionWeight | None = None,
                   settings: RigidSettings | None = None) -> RigidSolveReport:
    """Fusion followed by refinement from the fused transform."""
    settings = settings or RigidSettings()
    fused = fuse_modalities(pair, weight, settings)
    return refine_rigid(pair, fused.q_fused, lam=fused.lam_used, settings=settings, base=fused)
