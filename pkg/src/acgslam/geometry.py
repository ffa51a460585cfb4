"""Planar rigid transforms and covariance helpers."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


def normalize_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.remainder(theta, TWO_PI)
    if a <= -math.pi:
        a += TWO_PI
    return a


def rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class Pose2:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))

    @classmethod
    def identity(cls) -> "Pose2":
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, v) -> "Pose2":
        return cls(v[0], v[1], v[2])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def compose(self, other: "Pose2") -> "Pose2":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )

    def inverse(self) -> "Pose2":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(-c * self.x - s * self.y, s * self.x - c * self.y, -self.theta)

    def between(self, other: "Pose2") -> "Pose2":
        return self.inverse().compose(other)

    def transform_point(self, p) -> np.ndarray:
        """Map a point from this pose's frame into the parent frame."""
        p = np.asarray(p, dtype=float)
        return p @ rot(self.theta).T + self.translation

    def inverse_transform_point(self, p) -> np.ndarray:
        """Map a point from the parent frame into this pose's frame."""
        p = np.asarray(p, dtype=float)
        return (p - self.translation) @ rot(self.theta)

    def __matmul__(self, other: "Pose2") -> "Pose2":
        return self.compose(other)


def compose(a: Pose2, b: Pose2) -> Pose2:
    return a.compose(b)


def inverse(p: Pose2) -> Pose2:
    return p.inverse()


def between(a: Pose2, b: Pose2) -> Pose2:
    """Relative transform ``d`` such that ``compose(a, d) == b``."""
    return a.between(b)


def anisotropic_cov(direction, lambda1: float, lambda2: float) -> np.ndarray:
    """Covariance whose eigenvector ``direction`` has eigenvalue ``lambda1``.

    The perpendicular direction gets ``lambda2``. Built as V L V^-1 with the
    eigenvectors as the columns of V.
    """
    d = np.asarray(direction, dtype=float).reshape(2)
    if not np.all(np.isfinite(d)) or abs(math.hypot(d[0], d[1]) - 1.0) > 1e-9:
        raise ValueError(f"direction must be a unit vector, got {d.tolist()}")
    if not (lambda1 > 0 and lambda2 > 0):
        raise ValueError(f"eigenvalues must be positive, got {lambda1}, {lambda2}")
    v = np.array([[d[0], -d[1]], [d[1], d[0]]])
    cov = v @ np.diag([lambda1, lambda2]) @ np.linalg.inv(v)
    return 0.5 * (cov + cov.T)


def is_spd(m, tol: float = 1e-12) -> bool:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or not np.all(np.isfinite(m)):
        return False
    if not np.allclose(m, m.T, atol=tol, rtol=0.0):
        return False
    return bool(np.all(np.linalg.eigvalsh(m) > 0))
