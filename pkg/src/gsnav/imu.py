"""Inertial preintegration and the relative-motion factor it induces.

Samples between two estimator epochs are folded into a single preintegrated
measurement (delta rotation/velocity/position) by midpoint integration, with
first-order bias Jacobians so the factor can be re-linearized at new bias
estimates without re-integrating, and a 9x9 covariance propagated alongside.
Gravity enters the residual, never the preintegration.
"""

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from .errors import NonMonotonicTime
from .geometry import (
    Rot3,
    skew,
    so3_exp,
    so3_log,
    so3_right_jacobian,
    so3_right_jacobian_inv,
)
from .states import NavState

GRAVITY_ENU = np.array([0.0, 0.0, -9.81])


@dataclass(frozen=True)
class ImuNoise:
    """Continuous-time white-noise densities and bias random-walk rates."""

    gyro: float = 1.7e-4        # rad/s/sqrt(Hz)
    accel: float = 2.0e-3       # m/s^2/sqrt(Hz)
    gyro_walk: float = 2.0e-5   # rad/s^2/sqrt(Hz)
    accel_walk: float = 3.0e-4  # m/s^3/sqrt(Hz)


@dataclass
class PreintegratedImu:
    delta_t: float
    delta_rot: Rot3
    delta_vel: np.ndarray
    delta_pos: np.ndarray
    cov: np.ndarray                      # 9x9 over [dtheta, dv, dp]
    cov_bias: np.ndarray                 # 6x6 random-walk block [dba, dbg]
    j_rot_bg: np.ndarray
    j_vel_ba: np.ndarray
    j_vel_bg: np.ndarray
    j_pos_ba: np.ndarray
    j_pos_bg: np.ndarray
    bias_acc_lin: np.ndarray
    bias_gyro_lin: np.ndarray

    def corrected(self, bias_acc: np.ndarray, bias_gyro: np.ndarray
                  ) -> Tuple[Rot3, np.ndarray, np.ndarray]:
        """First-order re-linearized deltas at a new bias estimate."""
        dba = np.asarray(bias_acc, dtype=float) - self.bias_acc_lin
        dbg = np.asarray(bias_gyro, dtype=float) - self.bias_gyro_lin
        rot = self.delta_rot * Rot3.exp(self.j_rot_bg @ dbg)
        vel = self.delta_vel + self.j_vel_ba @ dba + self.j_vel_bg @ dbg
        pos = self.delta_pos + self.j_pos_ba @ dba + self.j_pos_bg @ dbg
        return rot, vel, pos


def preintegrate(times: np.ndarray, gyro: np.ndarray, accel: np.ndarray,
                 bias_acc: np.ndarray = None, bias_gyro: np.ndarray = None,
                 noise: ImuNoise = ImuNoise()) -> PreintegratedImu:
    """Midpoint integration of a time-ordered sample run.

    `times` has n >= 2 entries; gyro/accel rows are sampled at those times
    and consecutive pairs are averaged over each interval.
    """
    times = np.asarray(times, dtype=float).reshape(-1)
    gyro = np.asarray(gyro, dtype=float).reshape(-1, 3)
    accel = np.asarray(accel, dtype=float).reshape(-1, 3)
    n = times.size
    if n < 2 or gyro.shape[0] != n or accel.shape[0] != n:
        raise ValueError("need >= 2 samples with matching gyro/accel rows")
    dts = np.diff(times)
    if np.any(dts <= 0):
        raise NonMonotonicTime("sample times must strictly increase")
    ba = np.zeros(3) if bias_acc is None else np.asarray(bias_acc, dtype=float)
    bg = np.zeros(3) if bias_gyro is None else np.asarray(bias_gyro, dtype=float)

    d_rot = np.eye(3)
    d_vel = np.zeros(3)
    d_pos = np.zeros(3)
    cov = np.zeros((9, 9))
    j_r = np.zeros((3, 3))
    j_v_ba = np.zeros((3, 3))
    j_v_bg = np.zeros((3, 3))
    j_p_ba = np.zeros((3, 3))
    j_p_bg = np.zeros((3, 3))
    var_g = noise.gyro ** 2
    var_a = noise.accel ** 2

    for k in range(n - 1):
        dt = dts[k]
        w_mid = 0.5 * (gyro[k] + gyro[k + 1]) - bg
        a0 = accel[k] - ba
        a1 = accel[k + 1] - ba
        phi = w_mid * dt
        step = so3_exp(phi)
        jr = so3_right_jacobian(phi)
        r0 = d_rot
        r1 = d_rot @ step
        a_mid = 0.5 * (r0 @ a0 + r1 @ a1)

        # covariance first (needs current-step blocks at the old state)
        a_th = -0.5 * (r0 @ skew(a0) + r1 @ skew(a1) @ step.T) * dt
        g_g_th = jr * dt
        g_g_v = -0.5 * (r1 @ skew(a1) @ jr) * dt * dt
        g_a_v = 0.5 * (r0 + r1) * dt
        f = np.eye(9)
        f[0:3, 0:3] = step.T
        f[3:6, 0:3] = a_th
        f[6:9, 0:3] = 0.5 * dt * a_th
        f[6:9, 3:6] = np.eye(3) * dt
        g = np.zeros((9, 6))
        g[0:3, 0:3] = g_g_th
        g[3:6, 0:3] = g_g_v
        g[3:6, 3:6] = g_a_v
        g[6:9, 0:3] = 0.5 * dt * g_g_v
        g[6:9, 3:6] = 0.5 * dt * g_a_v
        q = np.concatenate([np.full(3, var_g / dt), np.full(3, var_a / dt)])
        cov = f @ cov @ f.T + (g * q) @ g.T

        # bias Jacobians (position first: uses the old velocity Jacobians)
        da_ba = -0.5 * (r0 + r1)
        da_bg = -0.5 * (r0 @ skew(a0) @ j_r + r1 @ skew(a1) @ (step.T @ j_r - jr * dt))
        j_p_ba = j_p_ba + j_v_ba * dt + 0.5 * da_ba * dt * dt
        j_p_bg = j_p_bg + j_v_bg * dt + 0.5 * da_bg * dt * dt
        j_v_ba = j_v_ba + da_ba * dt
        j_v_bg = j_v_bg + da_bg * dt
        j_r = step.T @ j_r - jr * dt

        d_pos = d_pos + d_vel * dt + 0.5 * a_mid * dt * dt
        d_vel = d_vel + a_mid * dt
        d_rot = r1

    total = float(times[-1] - times[0])
    walk = np.concatenate([np.full(3, noise.accel_walk ** 2 * total),
                           np.full(3, noise.gyro_walk ** 2 * total)])
    return PreintegratedImu(
        delta_t=total,
        delta_rot=Rot3.from_matrix(d_rot),
        delta_vel=d_vel,
        delta_pos=d_pos,
        cov=0.5 * (cov + cov.T),
        cov_bias=np.diag(walk),
        j_rot_bg=j_r,
        j_vel_ba=j_v_ba,
        j_vel_bg=j_v_bg,
        j_pos_ba=j_p_ba,
        j_pos_bg=j_p_bg,
        bias_acc_lin=ba.copy(),
        bias_gyro_lin=bg.copy(),
    )


def imu_factor_residual(state_i: NavState, state_j: NavState,
                        preint: PreintegratedImu,
                        gravity: np.ndarray = GRAVITY_ENU
                        ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Relative-motion residual [r_rot, r_vel, r_pos] and its Jacobians.

    Jacobians are 9x15 against each state's tangent [dp, dtheta, dv, dba,
    dbg]; the preintegrated deltas are first-order corrected to the current
    bias estimate of state_i.
    """
    dt = preint.delta_t
    g = np.asarray(gravity, dtype=float)
    r_i = state_i.rot.matrix()
    r_j = state_j.rot.matrix()
    dbg = state_i.bg - preint.bias_gyro_lin
    dba = state_i.ba - preint.bias_acc_lin

    corr = preint.j_rot_bg @ dbg
    rot_hat = preint.delta_rot.matrix() @ so3_exp(corr)
    r_ij = r_i.T @ r_j
    r_rot = so3_log(rot_hat.T @ r_ij)
    y_v = r_i.T @ (state_j.v - state_i.v - g * dt)
    r_vel = y_v - (preint.delta_vel + preint.j_vel_ba @ dba
                   + preint.j_vel_bg @ dbg)
    y_p = r_i.T @ (state_j.p - state_i.p - state_i.v * dt - 0.5 * g * dt * dt)
    r_pos = y_p - (preint.delta_pos + preint.j_pos_ba @ dba
                   + preint.j_pos_bg @ dbg)
    residual = np.concatenate([r_rot, r_vel, r_pos])

    jr_inv = so3_right_jacobian_inv(r_rot)
    j_i = np.zeros((9, 15))
    j_j = np.zeros((9, 15))
    # rotation block
    j_i[0:3, 3:6] = -jr_inv @ r_ij.T
    j_i[0:3, 12:15] = -(jr_inv @ so3_exp(-r_rot)
                        @ so3_right_jacobian(corr) @ preint.j_rot_bg)
    j_j[0:3, 3:6] = jr_inv
    # velocity block
    j_i[3:6, 3:6] = skew(y_v)
    j_i[3:6, 6:9] = -r_i.T
    j_i[3:6, 9:12] = -preint.j_vel_ba
    j_i[3:6, 12:15] = -preint.j_vel_bg
    j_j[3:6, 6:9] = r_i.T
    # position block
    j_i[6:9, 0:3] = -r_i.T
    j_i[6:9, 3:6] = skew(y_p)
    j_i[6:9, 6:9] = -r_i.T * dt
    j_i[6:9, 9:12] = -preint.j_pos_ba
    j_i[6:9, 12:15] = -preint.j_pos_bg
    j_j[6:9, 0:3] = r_i.T
    return residual, j_i, j_j
