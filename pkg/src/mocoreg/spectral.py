"""Bandlimited velocity fields and discrete geodesic shooting.

Coefficients are stored centered: entry ``n`` along an axis holds frequency
``k = n - band // 2``, so ``k`` runs over ``-band/2 .. band/2 - 1``. The
spatial field on an ``N``-point axis is ``sum_k c_k exp(2 pi i k x / N)`` with
``x`` in voxels, so coefficient amplitudes do not depend on the grid size.
The ``k = -band/2`` slab has no conjugate partner inside the band and is held
at zero, which keeps every realized field real.

Quadratic terms are evaluated as truncated convolutions: both factors are
embedded in a zero-padded grid of ``3 * band / 2`` points per axis, multiplied
pointwise there and truncated back to the band. A product of two band fields
reaches frequencies in ``-band .. band - 2``; on that grid none of them alias
into the kept band, so the result is the exact truncated linear convolution.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft

from .errors import BandExceedsGrid, NonFinite
from .volume import Grid

_AXES = (-3, -2, -1)


def _workers() -> int:
    from .config import thread_count

    return thread_count()


class SpectralOperators:
    """Diagonal Fourier multipliers for a band on a given image grid.

    ``L(k) = (alpha * sum_j (2 - 2 cos(2 pi k_j / N_j)) + 1) ** power`` and its
    inverse ``K``; ``D_j(k) = i sin(2 pi k_j / N_j)`` is the central difference
    along axis ``j``.
    """

    def __init__(self, band: int = 16, grid_dims=(32, 32, 32), alpha: float = 3.0, power: int = 3):
        band = int(band)
        dims = tuple(int(n) for n in grid_dims)
        if band < 2 or band % 2:
            raise ValueError(f"band must be an even integer >= 2, got {band}")
        if len(dims) != 3:
            raise ValueError("grid_dims must have 3 entries")
        if band > min(dims) // 2:
            raise BandExceedsGrid(f"band {band} exceeds half the smallest grid dimension {min(dims)}")
        if alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if int(power) < 1:
            raise ValueError("power must be a positive integer")
        self.band = band
        self.grid_dims = dims
        self.alpha = float(alpha)
        self.power = int(power)
        self.pad = 3 * band // 2

        k = np.arange(band) - band // 2
        self.freqs = k
        self.sin = [np.sin(2.0 * np.pi * k / n) for n in dims]
        cosines = [2.0 - 2.0 * np.cos(2.0 * np.pi * k / n) for n in dims]
        lap = cosines[0][:, None, None] + cosines[1][None, :, None] + cosines[2][None, None, :]
        self.L = (self.alpha * lap + 1.0) ** self.power
        self.K = 1.0 / self.L
        valid = (k > -(band // 2)).astype(float)
        self.valid = valid[:, None, None] * valid[None, :, None] * valid[None, None, :]
        self._pad_pos = k % self.pad
        self._shape = (band, band, band)

    # -- diagonal operators --------------------------------------------------

    def d(self, axis: int, c: np.ndarray) -> np.ndarray:
        """Central-difference multiplier along ``axis`` (last three axes of ``c``)."""
        s = 1j * self.sin[axis]
        shape = [1, 1, 1]
        shape[axis] = self.band
        return c * s.reshape(shape)

    def d_adj(self, axis: int, c: np.ndarray) -> np.ndarray:
        s = -1j * self.sin[axis]
        shape = [1, 1, 1]
        shape[axis] = self.band
        return c * s.reshape(shape)

    def apply_L(self, c: np.ndarray) -> np.ndarray:
        return c * self.L

    def apply_K(self, c: np.ndarray) -> np.ndarray:
        return c * self.K

    # -- padded-grid transforms ----------------------------------------------

    def to_padded(self, c: np.ndarray) -> np.ndarray:
        """Band coefficients -> samples on the padded grid."""
        p = self.pad
        out = np.zeros(c.shape[:-3] + (p, p, p), dtype=np.complex128)
        pos = self._pad_pos
        out[..., pos[:, None, None], pos[None, :, None], pos[None, None, :]] = c
        return scipy.fft.ifftn(out, axes=_AXES, norm="forward", workers=_workers())

    def from_padded(self, x: np.ndarray) -> np.ndarray:
        """Padded-grid samples -> truncated band coefficients."""
        f = scipy.fft.fftn(x, axes=_AXES, norm="forward", workers=_workers())
        pos = self._pad_pos
        return f[..., pos[:, None, None], pos[None, :, None], pos[None, None, :]] * self.valid

    def zeros(self) -> np.ndarray:
        return np.zeros((3,) + self._shape, dtype=np.complex128)

    def to_dict(self) -> dict:
        return {"band": self.band, "grid_dims": list(self.grid_dims), "alpha": self.alpha, "p": self.power}


# -- symmetry helpers -----------------------------------------------------------


def reflect(c: np.ndarray) -> np.ndarray:
    """``r[k] = c[-k]`` on the last three axes (edge slab maps onto itself)."""
    r = np.flip(c, axis=_AXES)
    return np.roll(r, 1, axis=_AXES)


def project_symmetric(c: np.ndarray, ops: SpectralOperators) -> np.ndarray:
    """Nearest conjugate-symmetric array (edge slab zeroed)."""
    return 0.5 * (c + np.conj(reflect(c))) * ops.valid


def symmetry_error(c: np.ndarray) -> float:
    return float(np.max(np.abs(c - np.conj(reflect(c))))) if c.size else 0.0


@dataclass(frozen=True, eq=False)
class BandlimitedVelocity:
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=np.complex128)
        if c.ndim != 4 or c.shape[0] != 3 or len(set(c.shape[1:])) != 1:
            raise ValueError(f"coefficients must have shape (3, B, B, B), got {c.shape}")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zeros(cls, ops: SpectralOperators) -> "BandlimitedVelocity":
        return cls(ops.zeros())

    @property
    def band(self) -> int:
        return self.coeffs.shape[1]

    def norm(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.coeffs) ** 2)))

    def __add__(self, other):
        return BandlimitedVelocity(self.coeffs + other.coeffs)

    def scaled(self, a: float) -> "BandlimitedVelocity":
        return BandlimitedVelocity(self.coeffs * a)


@dataclass(frozen=True, eq=False)
class BandlimitedTransform:
    """Displacement part ``u`` of ``psi = id + u`` in the band."""

    disp_coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.disp_coeffs, dtype=np.complex128)
        c.setflags(write=False)
        object.__setattr__(self, "disp_coeffs", c)


@dataclass(frozen=True, eq=False)
class DeformationField:
    """Per-voxel displacement ``u`` (voxel units), shape ``(3, nx, ny, nz)``."""

    u: np.ndarray
    grid: Grid

    def __post_init__(self):
        u = np.array(self.u, dtype=np.float64)
        if u.shape != (3,) + tuple(self.grid.dims):
            raise ValueError(f"displacement shape {u.shape} does not match grid {self.grid.dims}")
        if not np.all(np.isfinite(u)):
            raise ValueError("displacement contains non-finite values")
        u.setflags(write=False)
        object.__setattr__(self, "u", u)

    @classmethod
    def zeros(cls, grid: Grid) -> "DeformationField":
        return cls(np.zeros((3,) + tuple(grid.dims)), grid)

    def max_magnitude(self) -> float:
        return float(np.max(np.sqrt(np.sum(self.u**2, axis=0))))


# -- EPDiff -----------------------------------------------------------------------


def _epdiff_parts(v: np.ndarray, ops: SpectralOperators):
    m = ops.apply_L(v)
    dv = np.stack([ops.d(i, v) for i in range(3)])  # dv[i, j] = D_i v_j
    sp = ops.to_padded(np.concatenate([v, m, dv.reshape((9,) + v.shape[1:])]))
    sv, sm, sdv = sp[:3], sp[3:6], sp[6:].reshape((3, 3) + sp.shape[1:])
    return m, sv, sm, sdv


def _epdiff_rhs_raw(v: np.ndarray, ops: SpectralOperators) -> np.ndarray:
    _, sv, sm, sdv = _epdiff_parts(v, ops)
    # (Dv)^T m : component i = sum_j (d_i v_j) m_j
    a = np.einsum("ij...,j...->i...", sdv, sm)
    # m (x) v : entry (i, j) = m_i v_j, divergence taken over j
    prod = sm[:, None] * sv[None, :]
    f = ops.from_padded(np.concatenate([a, prod.reshape((9,) + a.shape[1:])]))
    fa, fp = f[:3], f[3:].reshape((3, 3) + f.shape[1:])
    div = sum(ops.d(j, fp[:, j]) for j in range(3))
    return -ops.apply_K(fa + div) * ops.valid


def _epdiff_vjp(v: np.ndarray, rbar: np.ndarray, ops: SpectralOperators) -> np.ndarray:
    """Adjoint of the linearized EPDiff right-hand side at ``v`` applied to ``rbar``."""
    _, sv, sm, sdv = _epdiff_parts(v, ops)
    g = -ops.apply_K(rbar * ops.valid)
    # product adjoints: abar = trunc(S(cbar) * conj(S(b)))
    pbar = np.stack([ops.d_adj(j, g) for j in range(3)], axis=1)  # pbar[i, j] = D_j^* g_i
    sp = ops.to_padded(np.concatenate([g, pbar.reshape((9,) + g.shape[1:])]))
    sa, spb = sp[:3], sp[3:].reshape((3, 3) + sp.shape[1:])

    dvbar_sp = sa[:, None] * np.conj(sm)[None, :]  # [i, j] -> adjoint wrt d_i v_j
    mbar_sp = np.einsum("i...,ij...->j...", sa, np.conj(sdv)) + np.einsum("ij...,j...->i...", spb, np.conj(sv))
    vbar_sp = np.einsum("ij...,i...->j...", spb, np.conj(sm))
    f = ops.from_padded(np.concatenate([dvbar_sp.reshape((9,) + sa.shape[1:]), mbar_sp, vbar_sp]))
    dvbar = f[:9].reshape((3, 3) + f.shape[1:])
    mbar, vbar = f[9:12], f[12:15]
    out = vbar + ops.apply_L(mbar)
    for i in range(3):
        out = out + ops.d_adj(i, dvbar[i])
    return out * ops.valid


def epdiff_rhs(v: BandlimitedVelocity, ops: SpectralOperators) -> BandlimitedVelocity:
    """``-K[(D v)^T * L v + div(L v (x) v)]`` with truncated products."""
    return BandlimitedVelocity(_epdiff_rhs_raw(v.coeffs, ops))


def _check_finite(c: np.ndarray, step: int, what: str):
    if not np.all(np.isfinite(c)):
        raise NonFinite(f"{what} left the finite range at step {step}", step=step)


def _geodesic_raw(v0: np.ndarray, steps: int, ops: SpectralOperators) -> list:
    if steps < 1:
        raise ValueError("steps must be >= 1")
    dt = 1.0 / steps
    vs = [v0]
    v = v0
    for n in range(steps):
        v = v + dt * _epdiff_rhs_raw(v, ops)
        _check_finite(v, n + 1, "velocity")
        vs.append(v)
    return vs


def integrate_geodesic(v0: BandlimitedVelocity, steps: int, ops: SpectralOperators) -> list:
    """Forward Euler shooting; returns ``steps + 1`` velocities from ``v0`` to ``v1``."""
    return [BandlimitedVelocity(v) for v in _geodesic_raw(v0.coeffs, int(steps), ops)]


# -- transform evolution ------------------------------------------------------------


def _transport_parts(u: np.ndarray, v: np.ndarray, ops: SpectralOperators):
    du = np.stack([ops.d(j, u) for j in range(3)], axis=1)  # du[i, j] = D_j u_i
    sp = ops.to_padded(np.concatenate([v, du.reshape((9,) + u.shape[1:])]))
    return sp[:3], sp[3:].reshape((3, 3) + sp.shape[1:])


def _transport_raw(u: np.ndarray, v: np.ndarray, ops: SpectralOperators) -> np.ndarray:
    """``(D u) v``: component i = sum_j (d_j u_i) v_j, truncated."""
    sv, sdu = _transport_parts(u, v, ops)
    return ops.from_padded(np.einsum("ij...,j...->i...", sdu, sv))


def _transport_vjp(u: np.ndarray, v: np.ndarray, fbar: np.ndarray, ops: SpectralOperators):
    sv, sdu = _transport_parts(u, v, ops)
    sf = ops.to_padded(fbar * ops.valid)
    dubar_sp = sf[:, None] * np.conj(sv)[None, :]
    vbar_sp = np.einsum("i...,ij...->j...", sf, np.conj(sdu))
    f = ops.from_padded(np.concatenate([dubar_sp.reshape((9,) + sf.shape[1:]), vbar_sp]))
    dubar = f[:9].reshape((3, 3) + f.shape[1:])
    ubar = sum(ops.d_adj(j, dubar[:, j]) for j in range(3))
    return ubar * ops.valid, f[9:12]


def _transform_raw(vs: list, ops: SpectralOperators) -> list:
    steps = len(vs) - 1
    if steps < 1:
        raise ValueError("need at least two velocity samples")
    dt = 1.0 / steps
    u = np.zeros_like(vs[0])
    us = [u]
    for n in range(steps):
        u = u + dt * (-vs[n] - _transport_raw(u, vs[n], ops)) * ops.valid
        _check_finite(u, n + 1, "displacement")
        us.append(u)
    return us


def integrate_transform(vs: list, ops: SpectralOperators) -> BandlimitedTransform:
    """Euler steps of ``du/dt = -v - (D u) v`` from ``u = 0``."""
    raw = [v.coeffs if isinstance(v, BandlimitedVelocity) else np.asarray(v) for v in vs]
    return BandlimitedTransform(_transform_raw(raw, ops)[-1])


# -- spatial realization ---------------------------------------------------------


def _grid_positions(ops: SpectralOperators, dims) -> list:
    return [ops.freqs % n for n in dims]


def _check_band(ops: SpectralOperators, grid: Grid):
    if ops.band > min(grid.dims) // 2:
        raise BandExceedsGrid(f"band {ops.band} exceeds half of grid {grid.dims}")


def coeffs_to_spatial(c: np.ndarray, ops: SpectralOperators, grid: Grid) -> np.ndarray:
    _check_band(ops, grid)
    px, py, pz = _grid_positions(ops, grid.dims)
    full = np.zeros(c.shape[:-3] + tuple(grid.dims), dtype=np.complex128)
    full[..., px[:, None, None], py[None, :, None], pz[None, None, :]] = c * ops.valid
    x = scipy.fft.ifftn(full, axes=_AXES, norm="forward", workers=_workers())
    return x.real.copy()


def spatial_to_coeffs(x: np.ndarray, ops: SpectralOperators, grid: Grid) -> np.ndarray:
    """Forward transform of a spatial field followed by band truncation."""
    _check_band(ops, grid)
    f = scipy.fft.fftn(np.asarray(x, dtype=np.complex128), axes=_AXES, norm="forward", workers=_workers())
    px, py, pz = _grid_positions(ops, grid.dims)
    return f[..., px[:, None, None], py[None, :, None], pz[None, None, :]] * ops.valid


def spatial_adjoint(ubar: np.ndarray, ops: SpectralOperators, grid: Grid) -> np.ndarray:
    """Adjoint of :func:`coeffs_to_spatial` (real part taken) for real ``ubar``."""
    f = scipy.fft.fftn(ubar, axes=_AXES, workers=_workers())
    px, py, pz = _grid_positions(ops, grid.dims)
    return f[..., px[:, None, None], py[None, :, None], pz[None, None, :]] * ops.valid


def to_spatial(bt: BandlimitedTransform, grid: Grid, ops: SpectralOperators) -> DeformationField:
    """Zero-pad the band to the grid and invert; displacement in voxels."""
    return DeformationField(coeffs_to_spatial(bt.disp_coeffs, ops, grid), grid)


def velocity_to_spatial(v: BandlimitedVelocity, grid: Grid, ops: SpectralOperators) -> np.ndarray:
    return coeffs_to_spatial(v.coeffs, ops, grid)


def jacobian_min_det(field: DeformationField) -> float:
    """Minimum over interior voxels of ``det(I + Du)`` by central differences."""
    u = field.u
    if min(u.shape[1:]) < 3:
        raise ValueError("grid must be at least 3 voxels along every axis")
    jac = np.empty((3, 3) + tuple(n - 2 for n in u.shape[1:]))
    for i in range(3):
        for j in range(3):
            hi = [slice(1, -1)] * 3
            lo = [slice(1, -1)] * 3
            hi[j] = slice(2, None)
            lo[j] = slice(None, -2)
            jac[i, j] = 0.5 * (u[i][tuple(hi)] - u[i][tuple(lo)])
            if i == j:
                jac[i, j] += 1.0
    det = (
        jac[0, 0] * (jac[1, 1] * jac[2, 2] - jac[1, 2] * jac[2, 1])
        - jac[0, 1] * (jac[1, 0] * jac[2, 2] - jac[1, 2] * jac[2, 0])
        + jac[0, 2] * (jac[1, 0] * jac[2, 1] - jac[1, 1] * jac[2, 0])
    )
    return float(det.min())


def random_velocity(ops: SpectralOperators, rng: np.random.Generator, max_voxels: float | None = None,
                    smooth: bool = True) -> BandlimitedVelocity:
    """Random conjugate-symmetric velocity, optionally K-smoothed and scaled.

    With ``max_voxels`` the realized field on the operator's grid is scaled so
    that its largest vector magnitude equals that value.
    """
    c = rng.normal(size=(3,) + (ops.band,) * 3) + 1j * rng.normal(size=(3,) + (ops.band,) * 3)
    if smooth:
        c = ops.apply_K(c)
    c = project_symmetric(c, ops)
    if max_voxels is not None:
        grid = Grid(ops.grid_dims)
        x = coeffs_to_spatial(c, ops, grid)
        mag = np.sqrt(np.sum(x**2, axis=0)).max()
        if mag > 0:
            c = c * (max_voxels / mag)
    return BandlimitedVelocity(c)
