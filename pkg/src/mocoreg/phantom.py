"""Deterministic synthetic volumes for tests and demos."""
from __future__ import annotations

import numpy as np

from .volume import Grid, Mask3, Volume3


def _gauss_mixture(idx: np.ndarray, centers, widths, amps) -> np.ndarray:
    out = np.zeros(idx.shape[1:])
    for c, s, a in zip(centers, widths, amps):
        d2 = sum((idx[i] - c[i]) ** 2 for i in range(3))
        out += a * np.exp(-0.5 * d2 / (s * s))
    return out


def _soft_step(x: np.ndarray) -> np.ndarray:
    s = np.clip(x, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


def blobs_phantom(dims=(64, 64, 64), spacing_mm=3.0, seed: int = 0, extent: float = 0.22,
                  levels: int = 3, base: float = 0.3):
    """Smooth lobed object with textured interior and its mask.

    The silhouette is the 0.5 level set of a mixture of a few Gaussian lobes;
    the interior carries ``levels`` broad blobs of distinct brightness over a
    ``base`` floor. The same ``seed`` always gives the same volumes.
    ``extent`` bounds the object radius as a fraction of the smallest dimension.
    """
    dims = tuple(int(d) for d in dims)
    grid = Grid(dims, (float(spacing_mm),) * 3 if np.isscalar(spacing_mm) else spacing_mm)
    rng = np.random.default_rng(seed)
    idx = grid.index_coords()
    center = (np.asarray(dims) - 1) / 2.0
    r = extent * min(dims)
    limit = (extent + 0.08) * min(dims)
    dist = np.sqrt(sum((idx[i] - center[i]) ** 2 for i in range(3)))
    for _ in range(100):
        n_lobes = 5
        centers = center + rng.normal(scale=0.35 * r, size=(n_lobes, 3))
        widths = r * rng.uniform(0.3, 0.5, size=n_lobes)
        amps = rng.uniform(0.6, 1.0, size=n_lobes)
        f = _gauss_mixture(idx, centers, widths, amps)
        mask = f >= 0.5
        if mask.sum() > 0.002 * np.prod(dims) and dist[mask].max() <= limit:
            break
    else:
        raise RuntimeError("could not place a phantom inside the grid")

    # texture: a few broad blobs at distinct intensity levels, spread far apart
    # inside the mask so iso-intensity bands have well separated centroids
    pts = np.argwhere(mask).astype(float)
    sel = [pts[rng.integers(len(pts))]]
    for _ in range(levels - 1):
        d = np.min(np.linalg.norm(pts[:, None, :] - np.asarray(sel)[None], axis=2), axis=1)
        sel.append(pts[np.argmax(d)])
    tex_amps = np.linspace(1.0, 1.0 / levels, levels)[rng.permutation(levels)]
    tex = _gauss_mixture(idx, sel, r * rng.uniform(0.35, 0.5, size=levels), tex_amps)
    tex = tex / tex.max()
    envelope = _soft_step((f - 0.5) / 0.8 + 0.5)
    img = envelope * (base + (1.0 - base) * tex)
    img = img / img.max()
    return Volume3.on_grid(img, grid), Mask3.on_grid(mask, grid)


def sphere_phantom(dims=(64, 64, 64), spacing_mm=3.0, seed: int = 0, radius_frac: float = 0.25):
    """Ball with a one-voxel smooth edge and a linear intensity ramp along x."""
    dims = tuple(int(d) for d in dims)
    grid = Grid(dims, (float(spacing_mm),) * 3 if np.isscalar(spacing_mm) else spacing_mm)
    idx = grid.index_coords()
    center = (np.asarray(dims) - 1) / 2.0
    r = radius_frac * min(dims)
    dist = np.sqrt(sum((idx[i] - center[i]) ** 2 for i in range(3)))
    edge = _soft_step((r - dist) + 0.5)
    ramp = 0.6 + 0.4 * (idx[0] - center[0]) / max(r, 1.0)
    img = edge * np.clip(ramp, 0.2, 1.0)
    return Volume3.on_grid(img / img.max(), grid), Mask3.on_grid(dist <= r, grid)


def make_phantom(kind: str, dims=(64, 64, 64), spacing_mm=3.0, seed: int = 0):
    if kind == "blobs":
        return blobs_phantom(dims, spacing_mm, seed)
    if kind == "sphere":
        return sphere_phantom(dims, spacing_mm, seed)
    raise ValueError(f"unknown phantom kind {kind!r}")
