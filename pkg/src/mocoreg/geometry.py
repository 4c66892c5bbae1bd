"""Rotation and rigid-transform algebra.

Quaternions are stored scalar-first ``(w, x, y, z)``. A :class:`RigidTransform`
maps a world point ``p`` (mm) to ``R p + t`` and always holds a canonical unit
quaternion (``w >= 0``), so ``q`` and ``-q`` build the same transform.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateConfiguration

_NORM_TOL = 1e-12


@dataclass(frozen=True)
class Quaternion:
    w: float
    x: float
    y: float
    z: float

    @classmethod
    def identity(cls) -> "Quaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, a) -> "Quaternion":
        a = np.asarray(a, dtype=float)
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    @classmethod
    def from_axis_angle(cls, axis, angle_rad: float) -> "Quaternion":
        axis = np.asarray(axis, dtype=float)
        n = np.linalg.norm(axis)
        if n == 0.0:
            return cls.identity()
        axis = axis / n
        s = math.sin(0.5 * angle_rad)
        return cls(math.cos(0.5 * angle_rad), *(float(c) for c in axis * s)).normalized()

    @classmethod
    def from_matrix(cls, m) -> "Quaternion":
        """Shepperd's method: branch on the largest of trace and diagonal."""
        m = np.asarray(m, dtype=float)
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        cand = (tr, m[0, 0], m[1, 1], m[2, 2])
        k = int(np.argmax(cand))
        if k == 0:
            s = 2.0 * math.sqrt(max(1.0 + tr, 0.0))
            q = (0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s)
        elif k == 1:
            s = 2.0 * math.sqrt(max(1.0 + m[0, 0] - m[1, 1] - m[2, 2], 0.0))
            q = ((m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s)
        elif k == 2:
            s = 2.0 * math.sqrt(max(1.0 - m[0, 0] + m[1, 1] - m[2, 2], 0.0))
            q = ((m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s)
        else:
            s = 2.0 * math.sqrt(max(1.0 - m[0, 0] - m[1, 1] + m[2, 2], 0.0))
            q = ((m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s)
        return cls(*(float(c) for c in q)).normalized()

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def norm(self) -> float:
        return math.sqrt(self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z)

    def normalized(self) -> "Quaternion":
        n = self.norm()
        if n == 0.0:
            raise ValueError("cannot normalize a zero quaternion")
        q = Quaternion(self.w / n, self.x / n, self.y / n, self.z / n)
        # a second pass pulls the norm to within a couple of ulps of 1
        n2 = q.norm()
        if abs(n2 - 1.0) > _NORM_TOL:
            q = Quaternion(q.w / n2, q.x / n2, q.y / n2, q.z / n2)
        return q

    def canonical(self) -> "Quaternion":
        """Representative with ``w >= 0``; on ``w == 0`` the first nonzero of x, y, z is positive."""
        for c in (self.w, self.x, self.y, self.z):
            if c > 0.0:
                return self
            if c < 0.0:
                return -self
        return self

    def __neg__(self) -> "Quaternion":
        return Quaternion(-self.w, -self.x, -self.y, -self.z)

    def __mul__(self, o: "Quaternion") -> "Quaternion":
        return Quaternion(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )

    def conjugate(self) -> "Quaternion":
        return Quaternion(self.w, -self.x, -self.y, -self.z)

    def dot(self, o: "Quaternion") -> float:
        return self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z

    def to_matrix(self) -> np.ndarray:
        w, x, y, z = self.w, self.x, self.y, self.z
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )


def _as_vec3(v) -> np.ndarray:
    a = np.array(v, dtype=float).reshape(3)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """``p -> R p + t`` with ``R`` from a canonical unit quaternion, ``t`` in mm."""

    rotation: Quaternion = field(default_factory=Quaternion.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = self.rotation
        if abs(q.norm() - 1.0) > _NORM_TOL:
            q = q.normalized()
        object.__setattr__(self, "rotation", q.canonical())
        object.__setattr__(self, "translation", _as_vec3(self.translation))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, rot, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(Quaternion.from_matrix(rot), translation)

    @classmethod
    def from_axis_angle(cls, axis, angle_deg: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(Quaternion.from_axis_angle(axis, math.radians(angle_deg)), translation)

    @classmethod
    def about_pivot(cls, rotation: Quaternion, pivot, shift=(0.0, 0.0, 0.0)) -> "RigidTransform":
        """Rotate about ``pivot`` then shift: ``p -> R (p - c) + c + shift``."""
        c = np.asarray(pivot, dtype=float)
        r = rotation.normalized().to_matrix()
        return cls(rotation, c - r @ c + np.asarray(shift, dtype=float))

    @property
    def matrix(self) -> np.ndarray:
        return self.rotation.to_matrix()

    def homogeneous(self) -> np.ndarray:
        h = np.eye(4)
        h[:3, :3] = self.matrix
        h[:3, 3] = self.translation
        return h

    def apply(self, points) -> np.ndarray:
        """Apply to a 3-vector or an ``(n, 3)`` array of points."""
        p = np.asarray(points, dtype=float)
        return p @ self.matrix.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        q = self.rotation * other.rotation
        t = self.matrix @ other.translation + self.translation
        return RigidTransform(q, t)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def inverse(self) -> "RigidTransform":
        qi = self.rotation.conjugate()
        return RigidTransform(qi, -(qi.to_matrix() @ self.translation))

    def offset_at(self, pivot) -> np.ndarray:
        """Displacement of ``pivot`` under the transform, ``Q(c) - c``."""
        c = np.asarray(pivot, dtype=float)
        return self.apply(c) - c

    def to_dict(self) -> dict:
        q = self.rotation
        return {
            "quaternion": [q.w, q.x, q.y, q.z],
            "translation_mm": [float(v) for v in self.translation],
            "matrix": [float(v) for v in self.homogeneous().ravel()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        q = Quaternion.from_array(d["quaternion"])
        if abs(q.norm() - 1.0) > 1e-9:
            raise ValueError(f"quaternion is not unit length: {d['quaternion']}")
        out = cls(q, d["translation_mm"])
        if "matrix" in d:
            m = np.asarray(d["matrix"], dtype=float)
            if m.size != 16 or np.max(np.abs(m.reshape(4, 4) - out.homogeneous())) > 1e-9:
                raise ValueError("stored matrix disagrees with quaternion/translation")
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "RigidTransform":
        return cls.from_dict(json.loads(s))

    def __repr__(self) -> str:
        q = self.rotation
        t = self.translation
        return (
            f"RigidTransform(q=[{q.w:.6f}, {q.x:.6f}, {q.y:.6f}, {q.z:.6f}], "
            f"t=[{t[0]:.4f}, {t[1]:.4f}, {t[2]:.4f}])"
        )


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return a.compose(b)


def inverse(a: RigidTransform) -> RigidTransform:
    return a.inverse()


def apply_to_point(a: RigidTransform, p) -> np.ndarray:
    return a.apply(p)


# -- point correspondences and the closed-form solve -------------------------


@dataclass(frozen=True, eq=False)
class PointCorrespondence:
    source_points: np.ndarray
    target_points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.source_points, dtype=float)
        t = np.asarray(self.target_points, dtype=float)
        if s.ndim != 2 or s.shape[1] != 3 or s.shape != t.shape:
            raise ValueError(f"expected matching (K, 3) point arrays, got {s.shape} and {t.shape}")
        if s.shape[0] < 3:
            raise ValueError("need at least 3 correspondences")
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if w.shape[0] != s.shape[0]:
            raise ValueError("weights length does not match point count")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        total = w.sum()
        if total <= 0:
            raise ValueError("weights sum to zero")
        object.__setattr__(self, "source_points", s)
        object.__setattr__(self, "target_points", t)
        object.__setattr__(self, "weights", w / total)

    @classmethod
    def uniform(cls, source, target) -> "PointCorrespondence":
        n = np.asarray(source).shape[0]
        return cls(source, target, np.full(n, 1.0 / n))


@dataclass(frozen=True)
class KabschReport:
    singular_values: tuple
    reflection_corrected: bool
    residual_rms: float

    def to_dict(self) -> dict:
        return {
            "singular_values": list(self.singular_values),
            "reflection_corrected": self.reflection_corrected,
            "residual_rms": self.residual_rms,
        }


def weighted_residual(corr: PointCorrespondence, q: RigidTransform) -> float:
    d = q.apply(corr.source_points) - corr.target_points
    return float(np.sum(corr.weights * np.sum(d * d, axis=1)))


def kabsch_solve(corr: PointCorrespondence) -> tuple[RigidTransform, KabschReport]:
    """Weighted least-squares rigid fit of source points onto target points.

    Raises DegenerateConfiguration when the two smallest singular values of the
    cross-covariance are both negligible, i.e. the points are (nearly) collinear
    and the rotation about that line is undetermined.
    """
    w = corr.weights
    s_c = w @ corr.source_points
    t_c = w @ corr.target_points
    s0 = corr.source_points - s_c
    t0 = corr.target_points - t_c
    h = (s0 * w[:, None]).T @ t0
    u, sv, vt = np.linalg.svd(h)
    svals = tuple(float(x) for x in sv)
    if sv[0] <= 0.0 or (sv[1] < 1e-9 * sv[0] and sv[2] < 1e-9 * sv[0]):
        raise DegenerateConfiguration(
            f"rotation not identifiable, singular values {svals}", singular_values=svals
        )
    v = vt.T
    d = 1.0 if np.linalg.det(v @ u.T) > 0 else -1.0
    rot = v @ np.diag([1.0, 1.0, d]) @ u.T
    q = RigidTransform.from_matrix(rot)
    # translation from the quaternion's own matrix keeps the pair consistent
    out = RigidTransform(q.rotation, t_c - q.matrix @ s_c)
    rms = math.sqrt(max(weighted_residual(corr, out), 0.0))
    return out, KabschReport(svals, d < 0, rms)


# -- fusion and distances ------------------------------------------------------


def _quat_angle(a: Quaternion, b: Quaternion) -> float:
    """Arc between unit quaternions after hemisphere folding, in ``[0, pi/2]``."""
    qa, qb = a.as_array(), b.as_array()
    if qa @ qb < 0:
        qb = -qb
    return 2.0 * math.atan2(np.linalg.norm(qa - qb), np.linalg.norm(qa + qb))


def rotation_geodesic_angle(a: RigidTransform, b: RigidTransform) -> float:
    """Rotation angle of ``a^-1 b`` in degrees, in ``[0, 180]``.

    Equals ``2 arccos(|q_a . q_b|)``; evaluated through atan2 so that small
    angles keep full relative precision.
    """
    return math.degrees(2.0 * _quat_angle(a.rotation, b.rotation))


def slerp_fuse(q_image: RigidTransform, q_shape: RigidTransform, lam: float) -> RigidTransform:
    """Fuse two rigid transforms with weight ``lam`` toward ``q_shape``.

    Rotation follows the shorter great arc between the (hemisphere aligned)
    quaternions; translations blend linearly. When the two rotations are 180
    degrees apart either arc is a valid answer and the aligned one is used.
    """
    lam = float(lam)
    if not 0.0 <= lam <= 1.0 or math.isnan(lam):
        raise ValueError(f"fusion weight must lie in [0, 1], got {lam}")
    if lam == 0.0:
        return q_image
    if lam == 1.0:
        return q_shape
    qa = q_image.rotation.as_array()
    qb = q_shape.rotation.as_array()
    if qa @ qb < 0:
        qb = -qb
    theta = _quat_angle(q_image.rotation, q_shape.rotation)
    if theta < 1e-7:
        q = (1.0 - lam) * qa + lam * qb
    else:
        st = math.sin(theta)
        q = (math.sin((1.0 - lam) * theta) / st) * qa + (math.sin(lam * theta) / st) * qb
    t = (1.0 - lam) * q_image.translation + lam * q_shape.translation
    return RigidTransform(Quaternion.from_array(q).normalized(), t)


def random_rotation(rng: np.random.Generator, max_angle_deg: float = 180.0) -> Quaternion:
    """Axis uniform on the sphere, angle uniform in ``[0, max_angle_deg]``."""
    axis = rng.normal(size=3)
    while np.linalg.norm(axis) < 1e-12:
        axis = rng.normal(size=3)
    angle = rng.uniform(0.0, math.radians(max_angle_deg))
    return Quaternion.from_axis_angle(axis, angle)


def rotation_about_axis(axis: Sequence[float], angle_deg: float) -> RigidTransform:
    return RigidTransform.from_axis_angle(axis, angle_deg)
