"""Rigid-body poses, twists and wrenches.

Rotations are 3x3 orthonormal matrices, translations are in mm.  A pose is
treated as an element of SO(3) x R^3: the exponential/log maps act on the
rotation and translation independently, so interpolation is a slerp on the
rotation paired with a lerp on the translation.  All angular quantities are
in radians unless a name says otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

ORTHONORMAL_TOL = 1e-9

# 3 degrees of rotation count as much as 1 mm of translation.
DEFAULT_ROTATION_WEIGHT = 1.0 / np.radians(3.0)  # mm per rad


def _as_vec3(x) -> np.ndarray:
    v = np.asarray(x, dtype=float).reshape(3).copy()
    v.flags.writeable = False
    return v


def _as_mat3(x) -> np.ndarray:
    m = np.asarray(x, dtype=float).reshape(3, 3).copy()
    m.flags.writeable = False
    return m


@dataclass(frozen=True)
class Pose:
    """Object pose: rotation (orthonormal, det +1) and translation in mm."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _as_mat3(self.rotation))
        object.__setattr__(self, "translation", _as_vec3(self.translation))
        R = self.rotation
        if not np.allclose(R.T @ R, np.eye(3), atol=100 * ORTHONORMAL_TOL):
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(R) < 0.0:
            raise ValueError("rotation has negative determinant")

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def apply(self, point) -> np.ndarray:
        """Map a point from this pose's frame into the parent frame."""
        return self.rotation @ np.asarray(point, dtype=float) + self.translation

    def rotate(self, direction) -> np.ndarray:
        """Map a free vector from this pose's frame into the parent frame."""
        return self.rotation @ np.asarray(direction, dtype=float)


@dataclass(frozen=True)
class Twist:
    """Velocity over one unit step: linear in mm/step, angular in rad/step."""

    linear: np.ndarray
    angular: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "linear", _as_vec3(self.linear))
        object.__setattr__(self, "angular", _as_vec3(self.angular))
        if not (np.all(np.isfinite(self.linear)) and np.all(np.isfinite(self.angular))):
            raise ValueError("twist entries must be finite")

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.linear, self.angular])

    @staticmethod
    def from_vector(x) -> "Twist":
        x = np.asarray(x, dtype=float).reshape(6)
        return Twist(x[:3], x[3:])

    def scaled(self, factor: float) -> "Twist":
        return Twist(self.linear * factor, self.angular * factor)


@dataclass(frozen=True)
class Wrench:
    """Impulse wrench over one unit step: force in N*step, torque in N*mm*step."""

    force: np.ndarray
    torque: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "force", _as_vec3(self.force))
        object.__setattr__(self, "torque", _as_vec3(self.torque))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.force, self.torque])

    @staticmethod
    def from_vector(x) -> "Wrench":
        x = np.asarray(x, dtype=float).reshape(6)
        return Wrench(x[:3], x[3:])

    def __add__(self, other: "Wrench") -> "Wrench":
        return Wrench(self.force + other.force, self.torque + other.torque)


@dataclass(frozen=True)
class MetricWeights:
    """Weights of the scaled configuration metric.

    `rotation` converts geodesic rotation angle (rad) into equivalent mm.
    The default makes 3 degrees cost exactly as much as 1 mm.
    """

    translation: float = 1.0
    rotation: float = DEFAULT_ROTATION_WEIGHT

    def biased(self, rotation_factor: float) -> "MetricWeights":
        """Return weights with the rotation share rescaled by `rotation_factor`."""
        return MetricWeights(self.translation, self.rotation * rotation_factor)


def identity_pose() -> Pose:
    return Pose(np.eye(3), np.zeros(3))


def skew(w) -> np.ndarray:
    x, y, z = np.asarray(w, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_from_rotvec(r) -> np.ndarray:
    return Rotation.from_rotvec(np.array(r, dtype=float)).as_matrix()


def rotvec_from_rotation(R) -> np.ndarray:
    return Rotation.from_matrix(np.array(R, dtype=float)).as_rotvec()


def rotation_angle(R) -> float:
    """Geodesic angle of a rotation matrix, in [0, pi]."""
    tr = np.clip((np.trace(np.asarray(R, dtype=float)) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.arccos(tr))


def compose(a: Pose, b: Pose) -> Pose:
    """Group composition: the pose of b expressed through a."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(p: Pose) -> Pose:
    RT = p.rotation.T
    return Pose(RT, -RT @ p.translation)


def exp_twist(t: Twist) -> Pose:
    """Exponential map on SO(3) x R^3: rotation from the angular part,
    translation taken verbatim from the linear part."""
    return Pose(rotation_from_rotvec(t.angular), t.linear)


def log_pose(p: Pose) -> Twist:
    """Inverse of :func:`exp_twist` (rotation angle below pi)."""
    return Twist(p.translation, rotvec_from_rotation(p.rotation))


def step_pose(p: Pose, body_twist: Twist) -> Pose:
    """Advance a pose by one unit step of a body-frame twist."""
    return compose(p, exp_twist(body_twist))


def relative_twist(a: Pose, b: Pose) -> Twist:
    """Body-frame twist that steps pose `a` onto pose `b` in one unit."""
    return log_pose(compose(invert(a), b))


def interpolate_pose(start: Pose, goal: Pose, fraction: float) -> Pose:
    """Geodesic interpolation: lerp on translation, slerp on rotation.

    fraction 0 returns `start`, 1 returns `goal`.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    rel = relative_twist(start, goal)
    return step_pose(start, rel.scaled(fraction))


def pose_distance(a: Pose, b: Pose, weights: MetricWeights = MetricWeights()) -> float:
    """Scaled configuration distance in mm-equivalents.

    sqrt(|dt|^2 * w_t^2 + (w_r * geodesic angle)^2); with default weights a
    3 degree rotation contributes exactly as much as a 1 mm translation.
    """
    dt = np.linalg.norm(a.translation - b.translation)
    ang = rotation_angle(a.rotation.T @ b.rotation)
    return float(np.hypot(weights.translation * dt, weights.rotation * ang))


def twist_metric_norm(t: Twist, weights: MetricWeights = MetricWeights()) -> float:
    """Norm of a twist under the scaled configuration metric."""
    return float(
        np.hypot(
            weights.translation * np.linalg.norm(t.linear),
            weights.rotation * np.linalg.norm(t.angular),
        )
    )


def twist_metric_inner(a: Twist, b: Twist, weights: MetricWeights = MetricWeights()) -> float:
    """Inner product matching :func:`twist_metric_norm`."""
    wt = weights.translation**2
    wr = weights.rotation**2
    return float(wt * a.linear @ b.linear + wr * a.angular @ b.angular)


def poses_allclose(a: Pose, b: Pose, tol: float = 1e-9) -> bool:
    return bool(
        np.allclose(a.rotation, b.rotation, atol=tol)
        and np.allclose(a.translation, b.translation, atol=tol)
    )


def rpy_degrees(R) -> np.ndarray:
    """Decompose R = Rz(c) @ Ry(b) @ Rx(a); returns (a, b, c) in degrees."""
    return Rotation.from_matrix(np.array(R, dtype=float)).as_euler("xyz", degrees=True)


def rotation_from_rpy_degrees(angles) -> np.ndarray:
    return Rotation.from_euler("xyz", np.array(angles, dtype=float), degrees=True).as_matrix()
