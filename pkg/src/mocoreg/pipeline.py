"""Alternating rigid + deformable registration and chained sequence tracking."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .deform_solver import OptimizerSettings, ShootingSolution, solve_both_channels
from .errors import GridMismatch, MocoError
from .evaluation import transform_error
from .geometry import RigidTransform, rotation_geodesic_angle
from .rigid_solver import (
    FusionWeight,
    ModalityPair,
    RigidSettings,
    RigidSolveReport,
    alignment_loss,
    fuse_modalities,
    refine_rigid,
)
from .spectral import DeformationField, SpectralOperators
from .volume import Mask3, Volume3, gaussian_smooth, resample_rigid, sample_trilinear

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ShootingConfig:
    band: int = 16
    steps: int = 10
    alpha: float = 3.0
    power: int = 3
    sigma2: float = 0.01
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)

    def operators(self, grid_dims) -> SpectralOperators:
        return SpectralOperators(self.band, grid_dims, self.alpha, self.power)

    def to_dict(self) -> dict:
        return {
            "band": self.band,
            "steps": self.steps,
            "alpha": self.alpha,
            "power": self.power,
            "sigma2": self.sigma2,
            "optimizer": self.optimizer.to_dict(),
        }


@dataclass(frozen=True)
class JointConfig:
    outer_rounds: int = 3
    rigid: RigidSettings = field(default_factory=RigidSettings)
    shooting: ShootingConfig = field(default_factory=ShootingConfig)
    fusion: FusionWeight = field(default_factory=lambda: FusionWeight(0.5, "auto"))
    deformation_enabled: bool = True

    def __post_init__(self):
        if int(self.outer_rounds) < 1:
            raise ValueError("outer_rounds must be >= 1")

    def to_dict(self) -> dict:
        return {
            "outer_rounds": self.outer_rounds,
            "rigid": self.rigid.to_dict(),
            "shooting": self.shooting.to_dict(),
            "fusion": {"lambda": self.fusion.lam, "mode": self.fusion.mode},
            "deformation_enabled": self.deformation_enabled,
        }


@dataclass(eq=False)
class RegistrationResult:
    rigid: RigidSolveReport
    deform_image: ShootingSolution | None = None
    deform_shape: ShootingSolution | None = None
    loss_table: list = field(default_factory=list)
    wall_time: dict = field(default_factory=dict)
    failure: str | None = None
    config: dict = field(default_factory=dict)

    @property
    def transform(self) -> RigidTransform:
        return self.rigid.q_fused

    @property
    def total_loss(self) -> float:
        accepted = [r["total"] for r in self.loss_table if r["status"] == "accepted"]
        return accepted[-1] if accepted else float("nan")

    def _field(self, prefer: str) -> DeformationField | None:
        sols = [self.deform_shape, self.deform_image] if prefer == "shape" else [self.deform_image, self.deform_shape]
        for s in sols:
            if s is not None:
                return s.realized_field
        return None

    def warp_source(self, vol: Volume3, prefer: str = "image") -> Volume3:
        """Move a source-space volume through the rigid and (if any) deformable maps."""
        moved = resample_rigid(vol, self.transform)
        f = self._field(prefer)
        if f is None:
            return moved
        return moved.with_data(sample_trilinear(moved.data, moved.grid.index_coords() + f.u, mode="wrap"))

    def warp_mask(self, mask: Mask3, prefer: str = "shape") -> Mask3:
        moved = self.warp_source(mask.as_volume(), prefer)
        return Mask3.on_grid(moved.data >= 0.5, moved.grid)

    def to_dict(self) -> dict:
        out = {
            "rigid": self.rigid.to_dict(),
            "transform": self.transform.to_dict(),
            "loss_table": self.loss_table,
            "failure": self.failure,
            "config": self.config,
            "wall_time": self.wall_time,
        }
        for name, sol in (("deform_image", self.deform_image), ("deform_shape", self.deform_shape)):
            out[name] = None if sol is None else sol.diagnostics()
        return out


def deformation_corrected_source(vol: Volume3, q: RigidTransform, disp: DeformationField) -> Volume3:
    """Source with the deformation removed, so that resampling it by ``q`` alone matches the target.

    If the target satisfies ``T(x) ~ S(q^-1(x + u(x)))``, the returned volume is
    ``S'(y) = S(q^-1(q(y) + u(q(y))))`` and ``S' o q^-1 ~ T``.
    """
    grid = vol.grid
    if not disp.grid.congruent(grid):
        raise GridMismatch("deformation and volume grids differ")
    world = grid.world_coords()
    pts = world.reshape(3, -1).T
    z_idx = grid.to_index(q.apply(pts).T)
    u = np.stack([sample_trilinear(disp.u[a], z_idx, mode="wrap") for a in range(3)])
    w = (z_idx + u) * grid.spacing[:, None] + grid.origin[:, None]
    src_idx = grid.to_index(q.inverse().apply(w.T).T)
    vals = sample_trilinear(vol.data, src_idx.reshape((3,) + grid.dims))
    return vol.with_data(vals)


def _row(rnd, status, rigid=None, e_i=None, e_g=None, lam=None):
    total = None
    if rigid is not None:
        total = rigid + (e_i or 0.0) + (e_g or 0.0)
    return {"round": rnd, "status": status, "rigid_loss": rigid, "energy_image": e_i,
            "energy_shape": e_g, "total": total, "lambda": lam}


def _rigid_stage(pair: ModalityPair, cfg: JointConfig, start_candidates) -> RigidSolveReport:
    fused = fuse_modalities(pair, cfg.fusion, cfg.rigid)
    start = fused.q_fused
    best = fused.final_loss
    for cand in start_candidates:
        if cand is None:
            continue
        loss = alignment_loss(pair, cand, cfg.rigid)
        if loss < best:
            start, best = cand, loss
    return refine_rigid(pair, start, lam=fused.lam_used, settings=cfg.rigid, base=fused)


def joint_register(pair: ModalityPair, cfg: JointConfig | None = None,
                   initial: RigidTransform | None = None) -> RegistrationResult:
    """Alternate rigid estimation and velocity shooting on one pair.

    Round 1 fuses and refines on the given pair, then solves both velocity
    fields on the rigidly aligned sources. Later rounds re-estimate the rigid
    part on sources with the current deformation removed, then re-solve the
    velocities warm-started from the previous round. A round whose total
    (rigid loss plus both shooting energies) exceeds the previous one is
    rolled back and the loop stops. ``initial``, when given, competes with the
    fused estimate as the refinement start.
    """
    cfg = cfg or JointConfig()
    rounds = int(cfg.outer_rounds)
    timing = {"rigid_s": 0.0, "deform_s": 0.0}
    table = []

    t = time.perf_counter()
    rigid = _rigid_stage(pair, cfg, [initial])
    timing["rigid_s"] += time.perf_counter() - t
    result = RegistrationResult(rigid=rigid, loss_table=table, wall_time=timing, config=cfg.to_dict())

    if not cfg.deformation_enabled:
        table.append(_row(1, "accepted", rigid.final_loss, lam=rigid.lam_used))
        table.extend(_row(r, "skipped") for r in range(2, rounds + 1))
        return result

    ops = cfg.shooting.operators(pair.grid.dims)
    sc = cfg.shooting
    t = time.perf_counter()
    try:
        sol_i, sol_g = solve_both_channels(pair, rigid.q_fused, ops, sc.sigma2, sc.steps, sc.optimizer)
    except MocoError as exc:
        timing["deform_s"] += time.perf_counter() - t
        result.failure = f"deformation round 1: {exc}"
        table.append(_row(1, "accepted", rigid.final_loss, lam=rigid.lam_used))
        table.extend(_row(r, "skipped") for r in range(2, rounds + 1))
        return result
    timing["deform_s"] += time.perf_counter() - t
    result.deform_image, result.deform_shape = sol_i, sol_g
    prev = _row(1, "accepted", rigid.final_loss, sol_i.energy, sol_g.energy if sol_g else None, rigid.lam_used)
    table.append(prev)

    for rnd in range(2, rounds + 1):
        try:
            t = time.perf_counter()
            q = result.rigid.q_fused
            src_i = deformation_corrected_source(pair.source_image, q, result.deform_image.realized_field)
            src_g = None
            if pair.has_shape:
                shape_field = (result.deform_shape or result.deform_image).realized_field
                src_g = deformation_corrected_source(pair.source_shape, q, shape_field)
            corrected = replace(pair, source_image=src_i, source_shape=src_g)
            rigid_r = _rigid_stage(corrected, cfg, [q])
            timing["rigid_s"] += time.perf_counter() - t
            t = time.perf_counter()
            sol_i, sol_g = solve_both_channels(
                pair, rigid_r.q_fused, ops, sc.sigma2, sc.steps, sc.optimizer,
                init_image=result.deform_image.v0,
                init_shape=result.deform_shape.v0 if result.deform_shape else None,
            )
            timing["deform_s"] += time.perf_counter() - t
        except MocoError as exc:
            result.failure = f"round {rnd}: {exc}"
            table.append(_row(rnd, "failed"))
            table.extend(_row(r, "skipped") for r in range(rnd + 1, rounds + 1))
            break
        row = _row(rnd, "accepted", rigid_r.final_loss, sol_i.energy, sol_g.energy if sol_g else None,
                   rigid_r.lam_used)
        if row["total"] > prev["total"]:
            row["status"] = "rolled_back"
            table.append(row)
            table.extend(_row(r, "skipped") for r in range(rnd + 1, rounds + 1))
            break
        table.append(row)
        prev = row
        result.rigid, result.deform_image, result.deform_shape = rigid_r, sol_i, sol_g
    return result


# -- sequences ----------------------------------------------------------------


@dataclass(eq=False)
class SequenceResult:
    transforms: list
    links: list
    metrics: list = field(default_factory=list)
    drift: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    wall_time: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.transforms)

    def corrected(self, frames) -> list:
        """Frames moved into the reference frame."""
        return [resample_rigid(f, q) for f, q in zip(frames, self.transforms)]

    def to_dict(self) -> dict:
        return {
            "frames": [
                {"index": i, "transform": q.to_dict(), "link": (None if l is None else l.to_dict()),
                 "failed": i in self.failures, **(self.metrics[i] if i < len(self.metrics) else {})}
                for i, (q, l) in enumerate(zip(self.transforms, self.links))
            ],
            "drift": self.drift,
            "failures": {str(k): v for k, v in self.failures.items()},
            "config": self.config,
            "wall_time": self.wall_time,
        }


def track_sequence(frames, masks=None, cfg: JointConfig | None = None, normalize: str = "range",
                   smooth_mm: float | None = None) -> SequenceResult:
    """Register each frame to its predecessor and chain the links back to frame 0.

    ``transforms[t]`` moves frame ``t`` onto frame 0 (``resample_rigid(frame_t,
    transforms[t]) ~ frame_0``). Each link starts from the better of a fresh
    fused estimate and the previous link. A failed link falls back to the
    identity and is recorded in ``failures``.

    Frames are Gaussian-smoothed by ``smooth_mm`` before estimation (default
    two voxels) since every frame after the first carries interpolation blur.
    """
    frames = list(frames)
    if len(frames) < 2:
        raise ValueError("tracking needs at least 2 frames")
    grid = frames[0].grid
    for f in frames[1:]:
        if not f.grid.congruent(grid):
            raise GridMismatch("all frames must share one grid")
    if masks is not None and len(masks) != len(frames):
        raise ValueError("masks must match frames one to one")
    cfg = cfg or JointConfig(deformation_enabled=False)
    center = grid.center
    if smooth_mm is None:
        smooth_mm = 2.0 * float(max(grid.spacing_mm))
    est = [gaussian_smooth(f, smooth_mm) for f in frames] if smooth_mm > 0 else frames
    ident = RigidTransform.identity()
    transforms = [ident]
    links = [None]
    metrics = [{"link_angle_deg": 0.0, "link_shift_mm": 0.0}]
    failures = {}
    prev_link = None
    t0 = time.perf_counter()
    for t in range(1, len(frames)):
        try:
            pair = ModalityPair.build(
                est[t], est[t - 1],
                None if masks is None else masks[t], None if masks is None else masks[t - 1],
                normalize=normalize,
            )
            link = joint_register(pair, cfg, initial=prev_link).transform
        except MocoError as exc:
            log.warning("link %d -> %d failed: %s", t, t - 1, exc)
            failures[t] = str(exc)
            link = ident
        links.append(link)
        transforms.append(transforms[-1].compose(link))
        metrics.append({
            "link_angle_deg": rotation_geodesic_angle(link, ident),
            "link_shift_mm": float(np.linalg.norm(link.offset_at(center))),
        })
        prev_link = link
    steps_deg = [m["link_angle_deg"] for m in metrics[1:]]
    drift = {
        "endpoint_angle_deg": rotation_geodesic_angle(transforms[-1], ident),
        "endpoint_shift_mm": float(np.linalg.norm(transforms[-1].offset_at(center))),
        "path_angle_deg": float(np.sum(steps_deg)),
    }
    return SequenceResult(transforms, links, metrics, drift, failures,
                          {"total_s": time.perf_counter() - t0}, cfg.to_dict())


def sequence_errors(result: SequenceResult, truths, pivot) -> list:
    """Per-frame ``(trans_mm, ang_deg)`` against true frame-to-reference transforms."""
    return [transform_error(q, tr, pivot) for q, tr in zip(result.transforms, truths)]
