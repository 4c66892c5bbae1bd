"""Initial-velocity estimation by minimizing the shooting energy.

The energy of a velocity ``v0`` is

    E(v0) = (1 / sigma2) * sum_x (moving(x + u1(x)) - fixed(x))**2 + sum_k L(k) |v0(k)|**2

where ``u1`` is the displacement at time 1 obtained by Euler shooting. Its
gradient is accumulated in reverse through the same discrete steps, so it is
the exact derivative of the discrete energy.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import spectral as sp
from .errors import GridMismatch, NonFinite
from .spectral import BandlimitedVelocity, DeformationField, SpectralOperators
from .volume import Volume3, sample_trilinear

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ShootingProblem:
    moving: Volume3
    fixed: Volume3
    ops: SpectralOperators
    sigma2: float = 0.01
    steps: int = 10

    def __post_init__(self):
        if not self.moving.grid.congruent(self.fixed.grid):
            raise GridMismatch("moving and fixed volumes are on different grids")
        if tuple(self.ops.grid_dims) != tuple(self.moving.dims):
            raise GridMismatch(f"operators built for {self.ops.grid_dims}, volumes are {self.moving.dims}")
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        if int(self.steps) < 1:
            raise ValueError("steps must be >= 1")


@dataclass(eq=False)
class ShootingSolution:
    v0: BandlimitedVelocity
    energy_trace: list
    data_term: float
    reg_term: float
    realized_field: DeformationField
    min_jacobian: float
    iterations: int = 0
    converged: bool = False

    @property
    def energy(self) -> float:
        return self.data_term + self.reg_term

    def diagnostics(self) -> dict:
        return {
            "energy": self.energy,
            "data_term": self.data_term,
            "reg_term": self.reg_term,
            "energy_trace": [float(e) for e in self.energy_trace],
            "min_jacobian": self.min_jacobian,
            "iterations": self.iterations,
            "converged": self.converged,
            "v0_norm": self.v0.norm(),
            "max_displacement_vox": self.realized_field.max_magnitude(),
        }


def _coeffs(v0) -> np.ndarray:
    return v0.coeffs if isinstance(v0, BandlimitedVelocity) else np.asarray(v0, dtype=np.complex128)


def _forward(v0c: np.ndarray, prob: ShootingProblem):
    # overflow on an oversized trial step surfaces as NonFinite, not as warnings
    with np.errstate(over="ignore", invalid="ignore"):
        return _forward_impl(v0c, prob)


def _forward_impl(v0c: np.ndarray, prob: ShootingProblem):
    ops = prob.ops
    steps = int(prob.steps)
    dt = 1.0 / steps
    # the endpoint velocity never enters the transform, so stop one short
    vs = [v0c]
    for n in range(steps - 1):
        vs.append(vs[-1] + dt * sp._epdiff_rhs_raw(vs[-1], ops))
        sp._check_finite(vs[-1], n + 1, "velocity")
    vs.append(None)
    us = [np.zeros_like(v0c)]
    for n in range(steps):
        us.append(us[-1] + dt * (-vs[n] - sp._transport_raw(us[-1], vs[n], ops)) * ops.valid)
        sp._check_finite(us[-1], n + 1, "displacement")
    grid = prob.moving.grid
    u_sp = sp.coeffs_to_spatial(us[-1], ops, grid)
    sp._check_finite(u_sp, steps, "displacement")
    pos = grid.index_coords() + u_sp
    warped, dwarp = sample_trilinear(prob.moving.data, pos, with_grad=True, mode="wrap")
    resid = warped - prob.fixed.data
    data = float(np.sum(resid * resid) / prob.sigma2)
    reg = float(np.sum(ops.L * (v0c.real**2 + v0c.imag**2)))
    return {"vs": vs, "us": us, "u_sp": u_sp, "resid": resid, "dwarp": dwarp, "data": data, "reg": reg}


def _backward(v0c: np.ndarray, prob: ShootingProblem, tape: dict) -> np.ndarray:
    ops = prob.ops
    steps = int(prob.steps)
    dt = 1.0 / steps
    vs, us = tape["vs"], tape["us"]
    wbar = (2.0 / prob.sigma2) * tape["resid"]
    ubar = sp.spatial_adjoint(wbar[None] * tape["dwarp"], ops, prob.moving.grid)

    vbar_direct = [None] * steps
    for n in range(steps - 1, -1, -1):
        fbar = -dt * ubar * ops.valid
        du, dv = sp._transport_vjp(us[n], vs[n], fbar, ops)
        vbar_direct[n] = fbar + dv
        ubar = ubar + du

    vbar = vbar_direct[steps - 1]
    for n in range(steps - 2, -1, -1):
        vbar = vbar + dt * sp._epdiff_vjp(vs[n], vbar, ops) + vbar_direct[n]
    vbar = vbar + 2.0 * ops.L * v0c
    return sp.project_symmetric(vbar, ops)


def shooting_energy(v0, prob: ShootingProblem) -> tuple:
    """Return ``(total, data_term, reg_term)``."""
    tape = _forward(_coeffs(v0), prob)
    return tape["data"] + tape["reg"], tape["data"], tape["reg"]


def shooting_energy_and_gradient(v0, prob: ShootingProblem):
    v0c = _coeffs(v0)
    tape = _forward(v0c, prob)
    grad = _backward(v0c, prob, tape)
    return tape["data"] + tape["reg"], tape["data"], tape["reg"], BandlimitedVelocity(grad)


def shooting_gradient(v0, prob: ShootingProblem) -> BandlimitedVelocity:
    """Gradient with respect to real and imaginary parts, packed as ``d/dRe + i d/dIm``."""
    return shooting_energy_and_gradient(v0, prob)[3]


def realize(v0, prob: ShootingProblem) -> DeformationField:
    tape = _forward(_coeffs(v0), prob)
    return DeformationField(tape["u_sp"], prob.moving.grid)


def warp_with(vol: Volume3, v0, ops: SpectralOperators, steps: int = 10) -> Volume3:
    """Apply the map shot from ``v0`` to any volume on the operators' grid."""
    prob = ShootingProblem(vol, vol, ops, 1.0, steps)
    u = realize(v0, prob).u
    return vol.with_data(sample_trilinear(vol.data, vol.grid.index_coords() + u, mode="wrap"))


@dataclass(frozen=True)
class OptimizerSettings:
    max_iters: int = 100
    armijo_c: float = 1e-4
    shrink: float = 0.5
    initial_step: float = 1.0
    growth: float = 2.0
    rel_tol: float = 1e-6
    window: int = 5
    min_step: float = 1e-12
    precondition: bool = True

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def optimize_v0(prob: ShootingProblem, init=None, max_iters: int | None = None,
                settings: OptimizerSettings | None = None) -> ShootingSolution:
    """Backtracking gradient descent on the shooting energy.

    The search direction is the gradient smoothed by ``K`` (the gradient in
    the metric of the regularizer) when ``settings.precondition`` is set.
    Each line search starts from the last accepted step times ``growth``;
    the very first trial step is ``initial_step``.
    """
    settings = settings or OptimizerSettings()
    if max_iters is not None:
        settings = OptimizerSettings(**{**settings.to_dict(), "max_iters": int(max_iters)})
    ops = prob.ops
    v = prob.ops.zeros() if init is None else sp.project_symmetric(_coeffs(init), ops)
    energy, data, reg, g = shooting_energy_and_gradient(v, prob)
    g = g.coeffs
    trace = [energy]
    step = settings.initial_step
    converged = False
    iters = 0
    for it in range(settings.max_iters):
        d = -ops.apply_K(g) if settings.precondition else -g
        slope = float(np.real(np.vdot(g, d)))
        if not slope < 0 or abs(slope) <= 1e-300:
            converged = True
            break
        accepted = False
        while step >= settings.min_step:
            trial = v + step * d
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    e_t, d_t, r_t, g_t = shooting_energy_and_gradient(trial, prob)
            except NonFinite:
                step *= settings.shrink
                continue
            if not np.all(np.isfinite(g_t.coeffs)):
                step *= settings.shrink
                continue
            if e_t <= energy + settings.armijo_c * step * slope:
                accepted = True
                break
            step *= settings.shrink
        if not accepted:
            converged = True
            break
        v, energy, data, reg, g = trial, e_t, d_t, r_t, g_t.coeffs
        trace.append(energy)
        iters = it + 1
        step *= settings.growth
        w = settings.window
        if len(trace) > w:
            prev = trace[-1 - w]
            if prev - energy <= settings.rel_tol * max(abs(prev), 1e-300):
                converged = True
                break
    v0 = BandlimitedVelocity(v)
    field_ = realize(v0, prob)
    return ShootingSolution(
        v0=v0,
        energy_trace=trace,
        data_term=data,
        reg_term=reg,
        realized_field=field_,
        min_jacobian=sp.jacobian_min_det(field_),
        iterations=iters,
        converged=converged,
    )


def solve_both_channels(pair, q_fused, ops: SpectralOperators, sigma2: float = 0.01, steps: int = 10,
                        settings: OptimizerSettings | None = None, init_image=None, init_shape=None):
    """Independent velocity estimates for the image and (if present) shape channels.

    Sources are first moved by ``q_fused``. Returns ``(image_solution, shape_solution)``
    with ``shape_solution`` set to None when the pair has no shape channels.
    """
    from .volume import resample_rigid

    moving = resample_rigid(pair.source_image, q_fused, pair.target_image.grid)
    sol_i = optimize_v0(ShootingProblem(moving, pair.target_image, ops, sigma2, steps), init_image,
                        settings=settings)
    sol_g = None
    if pair.has_shape:
        moving_g = resample_rigid(pair.source_shape, q_fused, pair.target_shape.grid)
        sol_g = optimize_v0(ShootingProblem(moving_g, pair.target_shape, ops, sigma2, steps), init_shape,
                            settings=settings)
    return sol_i, sol_g
