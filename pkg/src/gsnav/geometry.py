"""SO(3)/SE(3) primitives and the tangent-space derivative blocks.

Conventions used everywhere in this package:

* rotations are unit quaternions (w, x, y, z); matrices are materialized on
  demand,
* twists are 6-vectors tau = (rho, phi) with rho the translational part
  (meters) and phi the rotational part (radians),
* derivatives on the manifold use the left (world-side) increment

      D f(T) / DT = lim_{tau->0} Log( f(Exp(tau) o T) o f(T)^-1 ) / tau

  so a pose is always perturbed as Exp(tau) o T.  Every analytical Jacobian
  in the package follows this single convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AngleNearPi

# Small-angle series switchover for sinc-type factors (4th-order Taylor).
SMALL_ANGLE = 1e-6
# log is refused within this margin of a pi rotation (cut locus).  Callers
# must stay below pi - 1e-6; the guard trips a little earlier so that a
# 179.9999 degree rotation is already rejected.
PI_MARGIN = 2e-6


def skew(v) -> np.ndarray:
    """Matrix form of the cross product: skew(v) @ u == cross(v, u)."""
    v = np.asarray(v, dtype=float)
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def _quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def _quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _matrix_to_quat(m: np.ndarray) -> np.ndarray:
    # Shepperd's method: pick the largest diagonal combination for stability.
    m = np.asarray(m, dtype=float)
    t = np.trace(m)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def so3_exp_quat(phi: np.ndarray) -> np.ndarray:
    """Axis-angle to unit quaternion, series below SMALL_ANGLE."""
    phi = np.asarray(phi, dtype=float)
    theta2 = float(phi @ phi)
    theta = np.sqrt(theta2)
    if theta < SMALL_ANGLE:
        # sin(t/2)/t = 1/2 - t^2/48 + t^4/3840
        k = 0.5 - theta2 / 48.0 + theta2 * theta2 / 3840.0
        w = 1.0 - theta2 / 8.0 + theta2 * theta2 / 384.0
    else:
        k = np.sin(0.5 * theta) / theta
        w = np.cos(0.5 * theta)
    q = np.concatenate(([w], k * phi))
    return q / np.linalg.norm(q)


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rotation matrix of an axis-angle vector (Rodrigues with series)."""
    return _quat_to_matrix(so3_exp_quat(phi))


def so3_log(rotation_matrix_or_quat) -> np.ndarray:
    """Principal-branch axis-angle of a rotation; raises AngleNearPi at the cut."""
    m = np.asarray(rotation_matrix_or_quat, dtype=float)
    q = _matrix_to_quat(m) if m.shape == (3, 3) else m.copy()
    if q[0] < 0:
        q = -q
    vnorm = float(np.linalg.norm(q[1:]))
    theta = 2.0 * np.arctan2(vnorm, float(q[0]))
    if theta > np.pi - PI_MARGIN:
        raise AngleNearPi(f"rotation angle {theta:.9f} rad is within {PI_MARGIN} of pi")
    if vnorm < 0.5 * SMALL_ANGLE:
        # phi = 2 v / w * (1 - |v|^2/(3 w^2) * ...) ; at this size 2 v suffices
        # to far better than 1e-12 relative, plus the next series term.
        return q[1:] * (2.0 / q[0]) * (1.0 - vnorm * vnorm / (3.0 * q[0] * q[0]))
    return q[1:] * (theta / vnorm)


def _so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    """V(phi) with exp_se3 translation t = V(phi) rho."""
    theta2 = float(phi @ phi)
    theta = np.sqrt(theta2)
    K = skew(phi)
    if theta < SMALL_ANGLE:
        a = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0
        b = 1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0
    else:
        a = (1.0 - np.cos(theta)) / theta2
        b = (theta - np.sin(theta)) / (theta2 * theta)
    return np.eye(3) + a * K + b * (K @ K)


def _so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    theta2 = float(phi @ phi)
    theta = np.sqrt(theta2)
    K = skew(phi)
    if theta < SMALL_ANGLE:
        c = 1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
    else:
        c = 1.0 / theta2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) - 0.5 * K + c * (K @ K)


def so3_right_jacobian(phi: np.ndarray) -> np.ndarray:
    """Right Jacobian J_r(phi) = V(-phi); used by the IMU preintegration."""
    return _so3_left_jacobian(-np.asarray(phi, dtype=float))


def so3_right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    return _so3_left_jacobian_inv(-np.asarray(phi, dtype=float))


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Rot3:
    """Rotation as a unit quaternion (w, x, y, z); immutable."""

    quat: np.ndarray = field(default_factory=lambda: _readonly([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0.0:
            raise ValueError("quaternion must be finite and nonzero")
        q = q / n
        if q[0] < 0:
            q = -q
        object.__setattr__(self, "quat", _readonly(q))

    @staticmethod
    def identity() -> "Rot3":
        return Rot3()

    @staticmethod
    def from_matrix(m) -> "Rot3":
        return Rot3(_matrix_to_quat(np.asarray(m, dtype=float)))

    @staticmethod
    def exp(phi) -> "Rot3":
        return Rot3(so3_exp_quat(np.asarray(phi, dtype=float)))

    def log(self) -> np.ndarray:
        return so3_log(self.quat)

    def matrix(self) -> np.ndarray:
        return _quat_to_matrix(self.quat)

    def compose(self, other: "Rot3") -> "Rot3":
        return Rot3(_quat_multiply(self.quat, other.quat))

    def __mul__(self, other: "Rot3") -> "Rot3":
        return self.compose(other)

    def inverse(self) -> "Rot3":
        w, x, y, z = self.quat
        return Rot3(np.array([w, -x, -y, -z]))

    def rotate(self, v) -> np.ndarray:
        return self.matrix() @ np.asarray(v, dtype=float)


@dataclass(frozen=True)
class Pose:
    """SE(3) element; applies as x -> R x + t. Immutable."""

    rotation: Rot3 = field(default_factory=Rot3)
    translation: np.ndarray = field(default_factory=lambda: _readonly(np.zeros(3)))

    def __post_init__(self):
        object.__setattr__(
            self, "translation", _readonly(np.asarray(self.translation, dtype=float).reshape(3))
        )

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    def compose(self, other: "Pose") -> "Pose":
        return Pose(
            self.rotation * other.rotation,
            self.rotation.rotate(other.translation) + self.translation,
        )

    def __mul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        rinv = self.rotation.inverse()
        return Pose(rinv, -rinv.rotate(self.translation))

    def transform(self, pts) -> np.ndarray:
        """Apply to one point (3,) or a stack (N, 3)."""
        pts = np.asarray(pts, dtype=float)
        if pts.ndim == 1:
            return self.rotation.rotate(pts) + self.translation
        return pts @ self.rotation.matrix().T + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.matrix()
        m[:3, 3] = self.translation
        return m


def exp_se3(tau) -> Pose:
    """SE(3) exponential of a twist (rho, phi)."""
    tau = np.asarray(tau, dtype=float).reshape(6)
    rho, phi = tau[:3], tau[3:]
    return Pose(Rot3.exp(phi), _so3_left_jacobian(phi) @ rho)


def log_se3(pose: Pose) -> np.ndarray:
    """Principal-branch SE(3) log; raises AngleNearPi near the cut locus."""
    phi = pose.rotation.log()
    rho = _so3_left_jacobian_inv(phi) @ pose.translation
    return np.concatenate([rho, phi])


def dmu_c_dT(mu_c) -> np.ndarray:
    """Derivative of mu_C = T * mu_W with respect to a left increment of T.

    With T perturbed as Exp(tau) o T the point moves by rho + phi x mu_C, so
    the 3x6 block is [I | -skew(mu_C)].  (The skew-block sign is fixed by the
    Exp(tau) o T convention; finite differences confirm it.)
    """
    mu_c = np.asarray(mu_c, dtype=float)
    out = np.zeros((3, 6))
    out[:, :3] = np.eye(3)
    out[:, 3:] = -skew(mu_c)
    return out


def dW_dT(w_matrix) -> np.ndarray:
    """Derivative of the rotation columns of T under the same left increment.

    Row block i (3x6) is [0 | -skew(W[:, i])]: column i of W moves by
    phi x W[:, i] and is unaffected by rho.  Returns the 9x6 stack for
    i = 0, 1, 2.
    """
    w_matrix = np.asarray(w_matrix, dtype=float)
    out = np.zeros((9, 6))
    for i in range(3):
        out[3 * i : 3 * i + 3, 3:] = -skew(w_matrix[:, i])
    return out
