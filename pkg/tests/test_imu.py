"""Preintegration against closed-form and re-integration oracles."""

import numpy as np
import pytest

from gsnav.errors import NonMonotonicTime
from gsnav.geometry import Rot3, so3_exp, so3_log
from gsnav.imu import GRAVITY_ENU, ImuNoise, imu_factor_residual, preintegrate
from gsnav.states import NavState


def wiggly_samples(rate=200.0, duration=1.0, seed=0):
    """Smooth, exciting gyro/accel profile for integration tests."""
    rng = np.random.default_rng(seed)
    t = np.arange(0.0, duration + 0.5 / rate, 1.0 / rate)
    amp_g = rng.uniform(0.2, 0.6, 3)
    amp_a = rng.uniform(0.5, 2.0, 3)
    ph = rng.uniform(0, 2 * np.pi, 6)
    gyro = amp_g * np.sin(np.outer(t, [2.1, 3.3, 1.7]) + ph[:3])
    accel = amp_a * np.cos(np.outer(t, [1.3, 2.9, 0.9]) + ph[3:])
    return t, gyro, accel


def consistent_state_pair(preint, seed=1):
    rng = np.random.default_rng(seed)
    rot_i = Rot3.exp(rng.uniform(-1, 1, 3))
    p_i = rng.uniform(-5, 5, 3)
    v_i = rng.uniform(-2, 2, 3)
    dt = preint.delta_t
    g = GRAVITY_ENU
    state_i = NavState(p_i, rot_i, v_i, preint.bias_acc_lin,
                       preint.bias_gyro_lin, 0.0)
    r_i = rot_i.matrix()
    rot_j = Rot3.from_matrix(r_i @ preint.delta_rot.matrix())
    v_j = v_i + g * dt + r_i @ preint.delta_vel
    p_j = p_i + v_i * dt + 0.5 * g * dt * dt + r_i @ preint.delta_pos
    state_j = NavState(p_j, rot_j, v_j, state_i.ba, state_i.bg, dt)
    return state_i, state_j


class TestPreintegrate:
    def test_zero_motion(self):
        t = np.linspace(0, 1, 101)
        pre = preintegrate(t, np.zeros((101, 3)), np.zeros((101, 3)))
        assert np.allclose(pre.delta_rot.matrix(), np.eye(3), atol=1e-15)
        assert np.allclose(pre.delta_vel, 0) and np.allclose(pre.delta_pos, 0)
        assert pre.delta_t == pytest.approx(1.0, abs=1e-12)

    def test_constant_rate_rotation(self):
        omega, duration = 0.7, 1.3
        t = np.arange(0, duration + 1e-9, 1e-2)
        gyro = np.tile([0.0, 0.0, omega], (t.size, 1))
        pre = preintegrate(t, gyro, np.zeros((t.size, 3)))
        want = so3_exp(np.array([0, 0, omega * (t[-1] - t[0])]))
        assert np.max(np.abs(pre.delta_rot.matrix() - want)) < 1e-8

    def test_constant_acceleration(self):
        t = np.linspace(0, 2, 401)
        accel = np.tile([0.3, -0.1, 0.2], (t.size, 1))
        pre = preintegrate(t, np.zeros((t.size, 3)), accel)
        assert np.allclose(pre.delta_vel, [0.6, -0.2, 0.4], atol=1e-12)
        assert np.allclose(pre.delta_pos, [0.6, -0.2, 0.4], atol=1e-12)

    def test_nonmonotonic_time_rejected(self):
        t = np.array([0.0, 0.1, 0.1, 0.3])
        with pytest.raises(NonMonotonicTime):
            preintegrate(t, np.zeros((4, 3)), np.zeros((4, 3)))

    def test_covariance_symmetric_psd_and_growing(self):
        t, gyro, accel = wiggly_samples()
        half = preintegrate(t[:101], gyro[:101], accel[:101])
        full = preintegrate(t, gyro, accel)
        for pre in (half, full):
            assert np.allclose(pre.cov, pre.cov.T, atol=1e-18)
            assert np.min(np.linalg.eigvalsh(pre.cov)) >= -1e-18
        assert np.trace(full.cov) > np.trace(half.cov)

    def test_bias_correction_matches_reintegration(self):
        t, gyro, accel = wiggly_samples(seed=3)
        pre = preintegrate(t, gyro, accel)
        rng = np.random.default_rng(4)
        dba = rng.uniform(-1, 1, 3) * 1e-3
        dbg = rng.uniform(-1, 1, 3) * 1e-3
        rot_c, vel_c, pos_c = pre.corrected(dba, dbg)
        exact = preintegrate(t, gyro, accel, dba, dbg)
        assert np.max(np.abs(rot_c.matrix() - exact.delta_rot.matrix())) < 1e-5
        assert np.max(np.abs(vel_c - exact.delta_vel)) < 1e-5
        assert np.max(np.abs(pos_c - exact.delta_pos)) < 1e-5


class TestImuFactor:
    def test_consistent_states_zero_residual(self):
        t, gyro, accel = wiggly_samples(seed=5)
        pre = preintegrate(t, gyro, accel)
        state_i, state_j = consistent_state_pair(pre)
        r, _, _ = imu_factor_residual(state_i, state_j, pre)
        assert np.max(np.abs(r)) < 1e-12

    def test_unmodeled_gravity_in_velocity_block(self):
        t = np.linspace(0, 0.5, 51)
        pre = preintegrate(t, np.zeros((51, 3)), np.zeros((51, 3)))
        zero = NavState.identity()
        still = NavState.identity(t=0.5)
        r, _, _ = imu_factor_residual(zero, still, pre)
        assert np.linalg.norm(r[3:6]) == pytest.approx(9.81 * 0.5, rel=1e-12)
        assert np.allclose(r[0:3], 0)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_jacobians_match_finite_differences(self, seed):
        t, gyro, accel = wiggly_samples(seed=seed, duration=0.5)
        rng = np.random.default_rng(seed + 10)
        ba = rng.uniform(-0.05, 0.05, 3)
        bg = rng.uniform(-0.01, 0.01, 3)
        pre = preintegrate(t, gyro, accel, ba, bg)
        state_i, state_j = consistent_state_pair(pre, seed=seed)
        # move off the zero-residual point and perturb biases off linearization
        state_i = state_i.retract(rng.uniform(-1, 1, 15) * 0.01)
        state_j = state_j.retract(rng.uniform(-1, 1, 15) * 0.01)
        r0, j_i, j_j = imu_factor_residual(state_i, state_j, pre)
        eps = 1e-6
        for which, state, jac in (("i", state_i, j_i), ("j", state_j, j_j)):
            fd = np.zeros((9, 15))
            for k in range(15):
                step = np.zeros(15)
                step[k] = eps
                if which == "i":
                    rp, _, _ = imu_factor_residual(state.retract(step), state_j, pre)
                    rm, _, _ = imu_factor_residual(state.retract(-step), state_j, pre)
                else:
                    rp, _, _ = imu_factor_residual(state_i, state.retract(step), pre)
                    rm, _, _ = imu_factor_residual(state_i, state.retract(-step), pre)
                fd[:, k] = (rp - rm) / (2 * eps)
            err = np.abs(jac - fd) / np.maximum(np.abs(fd), 1e-3)
            assert np.max(err) < 1e-5, f"state {which}: max rel err {np.max(err)}"
