"""3D scalar volumes, resampling, shape channels and keypoint extraction.

Arrays are indexed ``data[i, j, k]`` with ``i`` along x. World coordinates of
voxel ``(i, j, k)`` are ``origin + (i, j, k) * spacing`` (axis aligned grids,
no orientation matrix). All warps use pull-back sampling: the output value at
world point ``x`` is read from the input at the pre-image of ``x``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConstantVolume, EmptyMask, GridMismatch
from .geometry import RigidTransform


@dataclass(frozen=True)
class Grid:
    dims: tuple
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    origin_mm: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        sp = tuple(float(s) for s in self.spacing_mm)
        org = tuple(float(o) for o in self.origin_mm)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"dims must be 3 positive integers, got {self.dims}")
        if len(sp) != 3 or min(sp) <= 0:
            raise ValueError(f"spacing must be 3 positive reals, got {self.spacing_mm}")
        if len(org) != 3:
            raise ValueError("origin must have 3 entries")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing_mm", sp)
        object.__setattr__(self, "origin_mm", org)

    @property
    def spacing(self) -> np.ndarray:
        return np.asarray(self.spacing_mm)

    @property
    def origin(self) -> np.ndarray:
        return np.asarray(self.origin_mm)

    @property
    def center(self) -> np.ndarray:
        """World position of the grid's geometric center."""
        return self.origin + 0.5 * (np.asarray(self.dims) - 1) * self.spacing

    def index_coords(self) -> np.ndarray:
        """``(3, nx, ny, nz)`` array of voxel indices."""
        return np.stack(np.meshgrid(*[np.arange(n, dtype=float) for n in self.dims], indexing="ij"))

    def world_coords(self) -> np.ndarray:
        idx = self.index_coords()
        return idx * self.spacing[:, None, None, None] + self.origin[:, None, None, None]

    def to_index(self, world: np.ndarray) -> np.ndarray:
        """World points with coordinates on axis 0 -> continuous voxel indices."""
        shape = (3,) + (1,) * (world.ndim - 1)
        return (world - self.origin.reshape(shape)) / self.spacing.reshape(shape)

    def congruent(self, other: "Grid", tol: float = 1e-9) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=tol)
            and np.allclose(self.origin, other.origin, rtol=0, atol=tol)
        )

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "spacing_mm": list(self.spacing_mm), "origin_mm": list(self.origin_mm)}


@dataclass(frozen=True, eq=False)
class Volume3:
    data: np.ndarray
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    origin_mm: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        a = np.array(self.data, dtype=np.float64)
        if a.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("volume contains non-finite values")
        a.setflags(write=False)
        object.__setattr__(self, "data", a)
        g = Grid(a.shape, self.spacing_mm, self.origin_mm)
        object.__setattr__(self, "spacing_mm", g.spacing_mm)
        object.__setattr__(self, "origin_mm", g.origin_mm)

    @classmethod
    def on_grid(cls, data, grid: Grid) -> "Volume3":
        return cls(data, grid.spacing_mm, grid.origin_mm)

    @property
    def dims(self) -> tuple:
        return self.data.shape

    @property
    def grid(self) -> Grid:
        return Grid(self.data.shape, self.spacing_mm, self.origin_mm)

    def with_data(self, data) -> "Volume3":
        return Volume3(data, self.spacing_mm, self.origin_mm)


@dataclass(frozen=True, eq=False)
class Mask3:
    data: np.ndarray
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    origin_mm: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim != 3:
            raise ValueError(f"mask data must be 3D, got shape {a.shape}")
        if a.dtype != bool:
            if not np.all((a == 0) | (a == 1)):
                raise ValueError("mask values must be 0 or 1")
            a = a.astype(bool)
        else:
            a = a.copy()
        a.setflags(write=False)
        object.__setattr__(self, "data", a)
        g = Grid(a.shape, self.spacing_mm, self.origin_mm)
        object.__setattr__(self, "spacing_mm", g.spacing_mm)
        object.__setattr__(self, "origin_mm", g.origin_mm)

    @classmethod
    def on_grid(cls, data, grid: Grid) -> "Mask3":
        return cls(data, grid.spacing_mm, grid.origin_mm)

    @property
    def dims(self) -> tuple:
        return self.data.shape

    @property
    def grid(self) -> Grid:
        return Grid(self.data.shape, self.spacing_mm, self.origin_mm)

    def as_volume(self) -> Volume3:
        return Volume3(self.data.astype(np.float64), self.spacing_mm, self.origin_mm)


# -- interpolation -------------------------------------------------------------


def sample_trilinear(data: np.ndarray, coords: np.ndarray, with_grad: bool = False, mode: str = "zero"):
    """Trilinear interpolation of ``data`` at continuous voxel ``coords``.

    ``coords`` has shape ``(3, ...)``. With ``mode="zero"`` the array is
    extended by zeros: a sample farther than one voxel outside the grid reads
    0 and samples in the outermost half-open cell blend toward 0. With
    ``mode="wrap"`` the grid is periodic. ``with_grad`` also returns the
    derivative of the interpolant with respect to each coordinate.
    """
    data = np.asarray(data, dtype=np.float64)
    dims = data.shape
    out_shape = coords.shape[1:]
    c = coords.reshape(3, -1)

    if mode == "zero":
        src = np.pad(data, 1)
    elif mode == "wrap":
        src = data
    else:
        raise ValueError(f"unknown boundary mode {mode!r}")
    flat = src.ravel()
    sy, sz = src.shape[1], src.shape[2]

    lo = []
    hi = []
    frac = []
    inside = np.ones(c.shape[1], dtype=bool)
    for a, n in enumerate(dims):
        x = c[a]
        i0 = np.floor(x)
        f = x - i0
        if mode == "zero":
            inside &= (x > -1.0) & (x < n)
            i0 = np.clip(i0, -1, n - 1).astype(np.int64) + 1
            i1 = i0 + 1
        else:
            i0 = np.mod(i0.astype(np.int64), n)
            i1 = np.where(i0 == n - 1, 0, i0 + 1)
        lo.append(i0)
        hi.append(i1)
        frac.append(f)
    fx, fy, fz = frac
    x0 = lo[0] * (sy * sz)
    x1 = hi[0] * (sy * sz)
    y0 = lo[1] * sz
    y1 = hi[1] * sz
    z0, z1 = lo[2], hi[2]

    c000 = flat[x0 + y0 + z0]
    c001 = flat[x0 + y0 + z1]
    c010 = flat[x0 + y1 + z0]
    c011 = flat[x0 + y1 + z1]
    c100 = flat[x1 + y0 + z0]
    c101 = flat[x1 + y0 + z1]
    c110 = flat[x1 + y1 + z0]
    c111 = flat[x1 + y1 + z1]

    c00 = c000 + (c001 - c000) * fz
    c01 = c010 + (c011 - c010) * fz
    c10 = c100 + (c101 - c100) * fz
    c11 = c110 + (c111 - c110) * fz
    c0 = c00 + (c01 - c00) * fy
    c1 = c10 + (c11 - c10) * fy
    val = c0 + (c1 - c0) * fx
    if mode == "zero":
        val = np.where(inside, val, 0.0)
    val = val.reshape(out_shape)
    if not with_grad:
        return val

    gx = c1 - c0
    gy = (c01 - c00) + (c11 - c10 - c01 + c00) * fx
    dz0 = c001 - c000 + (c011 - c010 - c001 + c000) * fy
    dz1 = c101 - c100 + (c111 - c110 - c101 + c100) * fy
    gz = dz0 + (dz1 - dz0) * fx
    grads = (gx, gy, gz)
    if mode == "zero":
        grads = [np.where(inside, g, 0.0) for g in grads]
    return val, np.stack([g.reshape(out_shape) for g in grads])


def resample_rigid(vol: Volume3, q: RigidTransform, out_grid: Grid | None = None) -> Volume3:
    """Move the content of ``vol`` by ``q``: ``out(x) = vol(q^-1(x))``."""
    out_grid = vol.grid if out_grid is None else out_grid
    inv = q.inverse()
    # voxel index of the output -> voxel index of the input, as one affine map
    a = np.diag(1.0 / np.asarray(vol.spacing_mm)) @ inv.matrix @ np.diag(out_grid.spacing)
    b = (inv.apply(out_grid.origin) - np.asarray(vol.origin_mm)) / np.asarray(vol.spacing_mm)
    idx = out_grid.index_coords().reshape(3, -1)
    src = a @ idx + b[:, None]
    vals = sample_trilinear(vol.data, src.reshape((3,) + out_grid.dims))
    return Volume3.on_grid(vals, out_grid)


def resample_mask(mask: Mask3, q: RigidTransform, out_grid: Grid | None = None) -> Mask3:
    """Rigidly move a mask; interpolated occupancy is thresholded at 0.5."""
    moved = resample_rigid(mask.as_volume(), q, out_grid)
    return Mask3.on_grid(moved.data >= 0.5, moved.grid)


def warp_deformable(vol: Volume3, disp) -> Volume3:
    """``out(x) = vol(x + u(x))`` with ``u`` in voxel units.

    The grid is treated as periodic, matching the Fourier parameterization of
    the displacement.
    """
    u = np.asarray(disp.u)
    if tuple(disp.grid.dims) != tuple(vol.dims) or not disp.grid.congruent(vol.grid):
        raise GridMismatch(f"deformation grid {disp.grid.dims} does not match volume grid {vol.dims}")
    pos = vol.grid.index_coords() + u
    return vol.with_data(sample_trilinear(vol.data, pos, mode="wrap"))


# -- shape channels ------------------------------------------------------------


def distance_transform(mask: Mask3) -> Volume3:
    """Euclidean distance (mm) from each voxel center to the nearest set voxel."""
    m = np.asarray(mask.data, dtype=bool)
    if not m.any():
        raise EmptyMask("distance transform of an empty mask is undefined")
    if m.all():
        return Volume3(np.zeros(m.shape), mask.spacing_mm, mask.origin_mm)
    d = ndimage.distance_transform_edt(~m, sampling=mask.spacing_mm)
    return Volume3(d, mask.spacing_mm, mask.origin_mm)


def inside_distance(mask: Mask3) -> Volume3:
    """Depth map: distance from each set voxel to the nearest unset voxel, 0 outside."""
    m = np.asarray(mask.data, dtype=bool)
    if not m.any():
        raise EmptyMask("mask is empty")
    if m.all():
        return Volume3(np.zeros(m.shape), mask.spacing_mm, mask.origin_mm)
    return distance_transform(Mask3(~m, mask.spacing_mm, mask.origin_mm))


def _sigma_voxels(sigma_mm: float, spacing) -> list:
    return [float(sigma_mm) / float(s) for s in spacing]


def _gauss1d(x: np.ndarray, sigma_vox: float, axis: int = -1) -> np.ndarray:
    return ndimage.gaussian_filter1d(x, sigma_vox, axis=axis, mode="constant", cval=0.0, truncate=4.0)


def gaussian_smooth(vol: Volume3, sigma_mm: float) -> Volume3:
    """Separable Gaussian truncated at 4 sigma.

    Near the grid boundary the kernel is renormalized over the in-grid taps,
    so constants are preserved exactly and nothing is assumed outside.
    """
    if sigma_mm < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma_mm == 0:
        return vol
    out = np.array(vol.data, dtype=float)
    for axis, s in enumerate(_sigma_voxels(sigma_mm, vol.spacing_mm)):
        if s > 0:
            n = vol.dims[axis]
            norm = _gauss1d(np.ones(n), s)
            shape = [1, 1, 1]
            shape[axis] = n
            out = _gauss1d(out, s, axis=axis) / norm.reshape(shape)
    return vol.with_data(out)


def shape_channel(mask: Mask3, sigma_vox: float = 2.0) -> Volume3:
    """Smoothed depth map of a segmentation, the intensity-free shape image."""
    depth = inside_distance(mask)
    return gaussian_smooth(depth, sigma_vox * max(mask.spacing_mm))


def intensity_window(vol: Volume3) -> tuple[float, float]:
    """The [1st, 99th] percentile window of a volume."""
    p1, p99 = np.percentile(vol.data, [1.0, 99.0])
    if p99 - p1 < 1e-12:
        raise ConstantVolume(f"percentile window is empty (p1={p1}, p99={p99})")
    return float(p1), float(p99)


def apply_window(vol: Volume3, window: tuple[float, float]) -> Volume3:
    lo, hi = window
    return vol.with_data(np.clip((vol.data - lo) / (hi - lo), 0.0, 1.0))


def normalize_intensity(vol: Volume3) -> Volume3:
    """Map the [1st, 99th] percentile window linearly onto [0, 1], clamped."""
    return apply_window(vol, intensity_window(vol))


# -- keypoints -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class KeypointBankConfig:
    """Intensity-band channels used as the keypoint bank.

    ``percentile_edges`` are band edges expressed as percent of the normalized
    intensity range; the default starts at 10% so zero background, and noise
    around it, stays out of every channel.
    """

    num_channels: int = 128
    percentile_edges: np.ndarray | None = None
    smoothing_sigma_mm: float | None = None
    soft_width: float = 0.2
    presmooth_vox: float = 1.0

    def __post_init__(self):
        k = int(self.num_channels)
        if k < 4:
            raise ValueError("keypoint bank needs at least 4 channels")
        edges = self.percentile_edges
        if edges is None:
            edges = np.linspace(10.0, 100.0, k + 1)
        edges = np.asarray(edges, dtype=float)
        if edges.shape != (k + 1,):
            raise ValueError(f"expected {k + 1} band edges, got {edges.shape}")
        if np.any(np.diff(edges) <= 0) or edges[0] < 0 or edges[-1] > 100:
            raise ValueError("band edges must be strictly increasing within [0, 100]")
        edges.setflags(write=False)
        object.__setattr__(self, "num_channels", k)
        object.__setattr__(self, "percentile_edges", edges)
        if self.soft_width <= 0:
            raise ValueError("soft_width must be positive")
        if self.presmooth_vox < 0:
            raise ValueError("presmooth_vox must be non-negative")

    def presmooth(self, vol: Volume3) -> Volume3:
        # damps interpolation blur before the band nonlinearity
        if self.presmooth_vox <= 0:
            return vol
        return gaussian_smooth(vol, self.presmooth_vox * float(max(vol.spacing_mm)))

    def sigma_for(self, spacing) -> float:
        if self.smoothing_sigma_mm is not None:
            return float(self.smoothing_sigma_mm)
        return 2.0 * float(max(spacing))

    def to_dict(self) -> dict:
        return {
            "num_channels": self.num_channels,
            "percentile_edges": [float(e) for e in self.percentile_edges],
            "smoothing_sigma_mm": self.smoothing_sigma_mm,
            "soft_width": self.soft_width,
            "presmooth_vox": self.presmooth_vox,
        }


@dataclass(frozen=True, eq=False)
class KeypointSet:
    points: np.ndarray
    weights: np.ndarray
    channel_ids: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        total = w.sum()
        if total > 0:
            w = w / total
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "points", np.asarray(self.points, dtype=float))
        object.__setattr__(self, "channel_ids", np.asarray(self.channel_ids, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.weights)


def _smooth_step(s: np.ndarray) -> np.ndarray:
    s = np.clip(s, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


def band_indicators(values: np.ndarray, cfg: KeypointBankConfig) -> np.ndarray:
    """Soft band membership, shape ``(K, n)``; bands sum to a smoothed step."""
    edges = cfg.percentile_edges / 100.0
    w = cfg.soft_width
    # each ramp rises over [edge, edge + w] so nothing below the lowest edge leaks in
    steps = _smooth_step((values[None, :] - edges[:, None]) / w)
    if edges[-1] >= 1.0:
        # the top band is closed at the upper end of the intensity range
        steps[-1] = 0.0
    return steps[:-1] - steps[1:]


def _smoothing_moments_1d(n: int, spacing: float, origin: float, sigma_vox: float):
    """Per-voxel retained mass and first moment of the 1D smoothing operator.

    For ``y`` on the grid, returns ``sum_x S(x, y)`` and ``sum_x x S(x, y)``
    where ``S`` is the boundary-renormalized smoothing of :func:`gaussian_smooth`,
    i.e. its adjoint applied to the constant and coordinate functions.
    """
    ones = np.ones(n)
    xs = origin + spacing * np.arange(n, dtype=float)
    if sigma_vox <= 0:
        return ones, xs
    norm = _gauss1d(ones, sigma_vox)
    # the Gaussian taps are symmetric, so the adjoint of the zero-padded filter is itself
    return _gauss1d(ones / norm, sigma_vox), _gauss1d(xs / norm, sigma_vox)


def extract_keypoints(vol: Volume3, cfg: KeypointBankConfig | None = None) -> KeypointSet:
    """Centroids and masses of smoothed intensity-band channels.

    Channel ``k`` is the Gaussian-smoothed soft indicator of intensities in
    band ``k``. Smoothing is linear, so the channel's mass and first moments
    are computed from the unsmoothed indicator weighted by the smoothing
    adjoint of the constant and coordinate fields. This equals smoothing the
    full channel volume first, without building K smoothed volumes.
    """
    cfg = cfg or KeypointBankConfig()
    vol = cfg.presmooth(vol)
    grid = vol.grid
    k = cfg.num_channels
    sig = _sigma_voxels(cfg.sigma_for(grid.spacing_mm), grid.spacing_mm)
    moments = [
        _smoothing_moments_1d(n, sp, org, s)
        for n, sp, org, s in zip(grid.dims, grid.spacing_mm, grid.origin_mm, sig)
    ]

    lo = cfg.percentile_edges[0] / 100.0
    ii, jj, kk = np.nonzero(vol.data > lo)
    vals = vol.data[ii, jj, kk]
    (mx, fx), (my, fy), (mz, fz) = moments
    mass_w = mx[ii] * my[jj] * mz[kk]
    first_w = np.stack([fx[ii] * my[jj] * mz[kk], mx[ii] * fy[jj] * mz[kk], mx[ii] * my[jj] * fz[kk]])

    ind = band_indicators(vals, cfg) if vals.size else np.zeros((k, 0))
    mass = np.sum(ind * mass_w[None, :], axis=1)
    first = np.stack([np.sum(ind * first_w[a][None, :], axis=1) for a in range(3)], axis=1)

    points = np.tile(grid.center, (k, 1))
    ok = mass >= 1e-9
    points[ok] = first[ok] / mass[ok, None]
    weights = np.where(ok, mass, 0.0)
    return KeypointSet(points, weights, np.arange(k))


def extract_keypoints_dense(vol: Volume3, cfg: KeypointBankConfig | None = None) -> KeypointSet:
    """Reference path: smooth each channel volume explicitly, then take centroids."""
    cfg = cfg or KeypointBankConfig()
    vol = cfg.presmooth(vol)
    grid = vol.grid
    world = grid.world_coords().reshape(3, -1)
    ind = band_indicators(vol.data.ravel(), cfg)
    sigma = cfg.sigma_for(grid.spacing_mm)
    points = np.tile(grid.center, (cfg.num_channels, 1))
    weights = np.zeros(cfg.num_channels)
    for c in range(cfg.num_channels):
        ch = gaussian_smooth(Volume3(ind[c].reshape(grid.dims), grid.spacing_mm, grid.origin_mm), sigma)
        m = ch.data.sum()
        if m >= 1e-9:
            points[c] = (world * ch.data.ravel()[None, :]).sum(axis=1) / m
            weights[c] = m
    return KeypointSet(points, weights, np.arange(cfg.num_channels))
