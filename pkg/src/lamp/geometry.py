"""Rigid-body transforms on SE(3) and the tangent-space maps used by the solvers.

Conventions used throughout the package:

* A pose ``T = (R, t)`` maps points from its own frame into the parent frame:
  ``p_parent = R @ p_own + t``.  "Pose of B in A" composes with "pose of C in B"
  as ``T_AB @ T_BC``.
* Rotations are stored as orthonormal 3x3 matrices.  Quaternions appear only at
  I/O boundaries, ordered ``(qx, qy, qz, qw)``.
* A twist is a 6-vector ``[wx, wy, wz, vx, vy, vz]``: rotation part first
  (axis-angle, radians), translation part second (meters).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation as _Rotation

# Angle below which series expansions replace the closed forms.
_SMALL_ANGLE = 1e-8


class AngleNearPi(ValueError):
    """Rotation angle within 1e-6 of pi; the log map is not reliable there."""


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rotation matrix for an axis-angle 3-vector."""
    angle = float(np.linalg.norm(w))
    s = skew(w)
    s2 = s @ s
    if angle < _SMALL_ANGLE:
        return np.eye(3) + s + 0.5 * s2
    a = np.sin(angle) / angle
    b = (1.0 - np.cos(angle)) / (angle * angle)
    return np.eye(3) + a * s + b * s2


def so3_log(r: np.ndarray) -> np.ndarray:
    """Axis-angle 3-vector of a rotation matrix; raises AngleNearPi near pi."""
    off = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    angle = rotation_angle(r)
    if angle >= np.pi - 1e-6:
        raise AngleNearPi(f"rotation angle {angle:.9f} within 1e-6 of pi")
    if angle < _SMALL_ANGLE:
        return off
    return off * (angle / np.sin(angle))


def rotation_angle(r: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, in [0, pi].

    atan2 form: full precision near zero, where the arccos-of-trace form
    loses half the significant digits."""
    cos_angle = np.clip(0.5 * (np.trace(r) - 1.0), -1.0, 1.0)
    sin_angle = 0.5 * np.sqrt(
        (r[2, 1] - r[1, 2]) ** 2 + (r[0, 2] - r[2, 0]) ** 2 + (r[1, 0] - r[0, 1]) ** 2
    )
    return float(np.arctan2(sin_angle, cos_angle))


def so3_left_jacobian(w: np.ndarray) -> np.ndarray:
    angle = float(np.linalg.norm(w))
    s = skew(w)
    s2 = s @ s
    if angle < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * s + s2 / 6.0
    a2 = angle * angle
    b = (1.0 - np.cos(angle)) / a2
    c = (angle - np.sin(angle)) / (a2 * angle)
    return np.eye(3) + b * s + c * s2


def so3_left_jacobian_inv(w: np.ndarray) -> np.ndarray:
    angle = float(np.linalg.norm(w))
    s = skew(w)
    s2 = s @ s
    if angle < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * s + s2 / 12.0
    half = 0.5 * angle
    cot = half / np.tan(half)
    coeff = (1.0 - cot) / (angle * angle)
    return np.eye(3) - 0.5 * s + coeff * s2


def _orthonormalize(r: np.ndarray) -> np.ndarray:
    # Polar projection onto SO(3); flips the nearest reflection if needed.
    u, _, vt = np.linalg.svd(r)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


@dataclass(frozen=True)
class Pose3:
    """Rigid transform in SE(3); immutable value type."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float)
        t = np.array(self.translation, dtype=float).reshape(3)
        # Re-orthonormalize only when accumulated drift is detectable.
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9:
            r = _orthonormalize(r)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose3":
        return Pose3()

    @staticmethod
    def from_quat(q: np.ndarray, t: np.ndarray) -> "Pose3":
        """Build from (qx, qy, qz, qw) and translation."""
        return Pose3(_Rotation.from_quat(np.asarray(q, dtype=float)).as_matrix(), t)

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose3":
        return Pose3(m[:3, :3], m[:3, 3])

    @staticmethod
    def exp(xi: np.ndarray) -> "Pose3":
        """Exponential map of a twist [w, v]."""
        xi = np.asarray(xi, dtype=float).reshape(6)
        w, v = xi[:3], xi[3:]
        return Pose3(so3_exp(w), so3_left_jacobian(w) @ v)

    def log(self) -> np.ndarray:
        """Twist [w, v] with exp(log(T)) = T; raises AngleNearPi near pi."""
        w = so3_log(self.rotation)
        v = so3_left_jacobian_inv(w) @ self.translation
        return np.concatenate([w, v])

    def compose(self, other: "Pose3") -> "Pose3":
        return Pose3(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __matmul__(self, other: "Pose3") -> "Pose3":
        return self.compose(other)

    def inverse(self) -> "Pose3":
        rt = self.rotation.T
        return Pose3(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or many (N, 3) into the parent frame."""
        p = np.asarray(points, dtype=float)
        if p.ndim == 1:
            return self.rotation @ p + self.translation
        return p @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def quat(self) -> np.ndarray:
        """(qx, qy, qz, qw), canonicalized to qw >= 0."""
        q = _Rotation.from_matrix(self.rotation).as_quat()
        if q[3] < 0:
            q = -q
        return q

    def orthonormalized(self) -> "Pose3":
        return Pose3(_orthonormalize(self.rotation), self.translation)

    def __repr__(self):
        t = np.array2string(self.translation, precision=4, suppress_small=True)
        return f"Pose3(t={t}, angle={rotation_angle(self.rotation):.4f})"


def compose(a: Pose3, b: Pose3) -> Pose3:
    return a.compose(b)


def inverse(p: Pose3) -> Pose3:
    return p.inverse()


def geodesic_distances(a: Pose3, b: Pose3) -> tuple[float, float]:
    """(rotation angle of a.R b.R^T, ||a.t - b.t||): the error pair thresholds
    are applied to everywhere in this package."""
    rot_err = rotation_angle(a.rotation @ b.rotation.T)
    trans_err = float(np.linalg.norm(a.translation - b.translation))
    return rot_err, trans_err


def se3_adjoint(p: Pose3) -> np.ndarray:
    """Adjoint matrix mapping twists [w, v] between frames: Ad_T xi."""
    ad = np.zeros((6, 6))
    ad[:3, :3] = p.rotation
    ad[3:, 3:] = p.rotation
    ad[3:, :3] = skew(p.translation) @ p.rotation
    return ad


def _se3_q_matrix(w: np.ndarray, v: np.ndarray) -> np.ndarray:
    # Coupling block of the SE(3) left Jacobian (Barfoot's Q), ordering [w, v].
    angle = float(np.linalg.norm(w))
    sw = skew(w)
    sv = skew(v)
    sw2 = sw @ sw
    if angle < 1e-4:
        c1 = 1.0 / 6.0 - angle**2 / 120.0
        c2 = -1.0 / 24.0 + angle**2 / 720.0
        c3 = -1.0 / 120.0 + angle**2 / 2520.0
    else:
        a2 = angle * angle
        sin_a, cos_a = np.sin(angle), np.cos(angle)
        c1 = (angle - sin_a) / (a2 * angle)
        c2 = -(1.0 - 0.5 * a2 - cos_a) / (a2 * a2)
        c3 = -0.5 * (
            (1.0 - 0.5 * a2 - cos_a) / (a2 * a2)
            - 3.0 * (angle - sin_a - a2 * angle / 6.0) / (a2 * a2 * angle)
        )
    q = 0.5 * sv
    q += c1 * (sw @ sv + sv @ sw + sw @ sv @ sw)
    q += c2 * (sw2 @ sv + sv @ sw2 - 3.0 * sw @ sv @ sw)
    q += c3 * (sw @ sv @ sw2 + sw2 @ sv @ sw)
    return q


def se3_left_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float).reshape(6)
    w, v = xi[:3], xi[3:]
    jinv = so3_left_jacobian_inv(w)
    q = _se3_q_matrix(w, v)
    out = np.zeros((6, 6))
    out[:3, :3] = jinv
    out[3:, 3:] = jinv
    out[3:, :3] = -jinv @ q @ jinv
    return out


def se3_right_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian: d/d(delta) log(exp(xi) exp(delta)) at delta = 0."""
    return se3_left_jacobian_inv(-np.asarray(xi, dtype=float).reshape(6))


def yaw_pose(yaw: float, t=(0.0, 0.0, 0.0)) -> Pose3:
    """Pose rotated about +z by yaw radians, translated by t."""
    c, s = np.cos(yaw), np.sin(yaw)
    r = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return Pose3(r, np.asarray(t, dtype=float))


def random_pose(rng: np.random.Generator, max_angle: float = 3.0, max_trans: float = 10.0) -> Pose3:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    t = rng.uniform(-max_trans, max_trans, size=3)
    return Pose3(so3_exp(axis * angle), t)
