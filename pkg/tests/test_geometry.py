"""Geometry contracts: exp/log round trips, derivative blocks vs finite differences.

Oracles here are coded independently of the package: rotation exponentials go
through scipy.linalg.expm on the skew matrix, derivative checks use central
finite differences on the left-increment tangent.
"""

import numpy as np
import pytest
import scipy.linalg

from gsnav.errors import AngleNearPi
from gsnav.geometry import (
    Pose,
    Rot3,
    dW_dT,
    dmu_c_dT,
    exp_se3,
    log_se3,
    skew,
    so3_exp,
    so3_log,
)

FD_STEP = 1e-5


def rotmat_oracle(phi):
    """Independent rotation exponential: matrix exp of the skew form."""
    return scipy.linalg.expm(np.array(skew(phi)))


def random_pose(rng, max_angle=2.5):
    phi = rng.normal(size=3)
    n = np.linalg.norm(phi)
    if n > max_angle:
        phi *= max_angle / n
    return Pose(Rot3.exp(phi), rng.normal(scale=2.0, size=3))


def left_perturb(pose, tau):
    return exp_se3(tau) * pose


class TestSkew:
    def test_zero(self):
        assert np.array_equal(skew([0, 0, 0]), np.zeros((3, 3)))

    def test_basis_cross(self):
        assert np.allclose(skew([1, 0, 0]) @ np.array([0, 1, 0]), [0, 0, 1])

    def test_cross_product_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            v, u = rng.normal(size=3), rng.normal(size=3)
            assert np.allclose(skew(v) @ u, np.cross(v, u), atol=1e-15, rtol=1e-13)


class TestRot3:
    def test_exp_matches_matrix_exponential(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            phi = rng.normal(size=3)
            assert np.allclose(so3_exp(phi), rotmat_oracle(phi), atol=1e-12)

    def test_unit_norm_and_orthonormal(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            r = Rot3.exp(rng.normal(size=3))
            assert abs(np.linalg.norm(r.quat) - 1.0) <= 1e-12
            w = r.matrix()
            assert np.allclose(w.T @ w, np.eye(3), atol=1e-12)
            assert np.linalg.det(w) > 0

    def test_renormalization_over_many_compositions(self):
        # 2**20 > 1e6 compositions via a pairwise tree of quaternion products.
        rng = np.random.default_rng(3)
        quats = rng.normal(size=(2 ** 20, 4))
        quats /= np.linalg.norm(quats, axis=1, keepdims=True)

        def qmul(a, b):
            w = a[:, 0] * b[:, 0] - np.sum(a[:, 1:] * b[:, 1:], axis=1)
            xyz = (
                a[:, :1] * b[:, 1:]
                + b[:, :1] * a[:, 1:]
                + np.cross(a[:, 1:], b[:, 1:])
            )
            out = np.concatenate([w[:, None], xyz], axis=1)
            return out / np.linalg.norm(out, axis=1, keepdims=True)

        while quats.shape[0] > 1:
            half = quats.shape[0] // 2
            quats = qmul(quats[:half], quats[half : 2 * half])
            assert np.max(np.abs(np.linalg.norm(quats, axis=1) - 1.0)) <= 1e-12

    def test_log_round_trip(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            phi = rng.normal(size=3)
            n = np.linalg.norm(phi)
            if n > 3.0:
                phi *= 3.0 / n
            back = so3_log(so3_exp(phi))
            assert np.allclose(back, phi, atol=1e-9)

    def test_log_small_angles(self):
        for scale in (1e-3, 1e-7, 1e-10, 0.0):
            phi = np.array([0.6, -0.8, 0.0]) * scale
            assert np.allclose(so3_log(so3_exp(phi)), phi, atol=1e-15)

    def test_log_near_pi_raises(self):
        angle = np.pi * (179.9999 / 180.0)
        r = Rot3.exp([0, 0, angle])
        with pytest.raises(AngleNearPi):
            r.log()


class TestPose:
    def test_compose_inverse_is_identity(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            p = random_pose(rng)
            ident = p.compose(p.inverse())
            assert np.linalg.norm(ident.translation) <= 1e-10
            angle = 2 * np.arccos(min(1.0, abs(ident.rotation.quat[0])))
            assert angle <= 1e-10

    def test_transform_matches_matrix(self):
        rng = np.random.default_rng(6)
        p = random_pose(rng)
        pts = rng.normal(size=(11, 3))
        hom = np.concatenate([pts, np.ones((11, 1))], axis=1)
        assert np.allclose(p.transform(pts), (p.matrix() @ hom.T).T[:, :3], atol=1e-12)


class TestSe3Maps:
    def test_exp_zero_is_identity(self):
        p = exp_se3(np.zeros(6))
        assert np.allclose(p.translation, 0)
        assert np.allclose(p.rotation.quat, [1, 0, 0, 0])

    def test_pure_translation(self):
        p = exp_se3([1, 2, 3, 0, 0, 0])
        assert np.allclose(p.translation, [1, 2, 3])
        assert np.allclose(p.rotation.matrix(), np.eye(3), atol=1e-15)

    def test_quarter_turn_round_trip(self):
        tau = np.array([0, 0, 0, 0, 0, np.pi / 2])
        p = exp_se3(tau)
        assert np.allclose(p.rotation.matrix(), rotmat_oracle(tau[3:]), atol=1e-12)
        assert np.allclose(p.translation, 0)
        assert np.allclose(log_se3(p), tau, atol=1e-12)

    def test_round_trip_1000_random(self):
        rng = np.random.default_rng(8)
        for _ in range(1000):
            tau = rng.normal(size=6)
            n = np.linalg.norm(tau[3:])
            if n > 3.0:
                tau[3:] *= 3.0 / n
            assert np.allclose(log_se3(exp_se3(tau)), tau, atol=1e-9)

    def test_log_identity(self):
        assert np.array_equal(log_se3(Pose.identity()), np.zeros(6))

    def test_log_near_pi_raises(self):
        p = Pose(Rot3.exp([0, np.pi * (179.9999 / 180.0), 0]), [1, 2, 3])
        with pytest.raises(AngleNearPi):
            log_se3(p)


class TestDerivativeBlocks:
    def test_dmu_c_zero_point(self):
        block = dmu_c_dT(np.zeros(3))
        assert np.allclose(block, np.concatenate([np.eye(3), np.zeros((3, 3))], axis=1))

    def test_dmu_c_unit_z(self):
        block = dmu_c_dT([0, 0, 1])
        assert np.allclose(block[:, 3:], -skew([0, 0, 1]))

    def test_dmu_c_finite_difference(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            pose = random_pose(rng)
            mu_w = rng.normal(scale=3.0, size=3)
            mu_c = pose.transform(mu_w)
            block = dmu_c_dT(mu_c)
            fd = np.zeros((3, 6))
            for k in range(6):
                tau = np.zeros(6)
                tau[k] = FD_STEP
                plus = left_perturb(pose, tau).transform(mu_w)
                minus = left_perturb(pose, -tau).transform(mu_w)
                fd[:, k] = (plus - minus) / (2 * FD_STEP)
            assert np.allclose(block, fd, atol=1e-6)

    def test_dW_identity_pose(self):
        block = dW_dT(np.eye(3))
        eye = np.eye(3)
        for i in range(3):
            assert np.allclose(block[3 * i : 3 * i + 3, 3:], -skew(eye[:, i]))
            assert np.array_equal(block[3 * i : 3 * i + 3, :3], np.zeros((3, 3)))

    def test_dW_finite_difference(self):
        rng = np.random.default_rng(10)
        for _ in range(50):
            pose = random_pose(rng)
            w = pose.rotation.matrix()
            block = dW_dT(w)
            fd = np.zeros((9, 6))
            for k in range(6):
                tau = np.zeros(6)
                tau[k] = FD_STEP
                wp = left_perturb(pose, tau).rotation.matrix()
                wm = left_perturb(pose, -tau).rotation.matrix()
                # rows are the stacked columns of W
                fd[:, k] = ((wp - wm) / (2 * FD_STEP)).T.reshape(9)
            assert np.allclose(block, fd, atol=1e-6)

    def test_dW_first_order_antisymmetry(self):
        rng = np.random.default_rng(11)
        pose = random_pose(rng)
        w = pose.rotation.matrix()
        block = dW_dT(w)
        for k in range(6):
            dw = np.zeros((3, 3))
            for i in range(3):
                dw[:, i] = block[3 * i : 3 * i + 3, k]
            a = w.T @ dw
            assert np.allclose(a, -a.T, atol=1e-12)

    def test_composite_function_fd_consistency(self):
        # property: analytic derivative of a composed smooth map agrees with
        # central differences to <= 1e-5 relative error.
        rng = np.random.default_rng(12)
        for _ in range(25):
            pose = random_pose(rng)
            a = rng.normal(scale=2.0, size=3)
            b = rng.normal(size=3)
            mu_a = pose.transform(a)
            w = pose.rotation.matrix()
            # f(T) = (T a) x (W b): combines both derivative blocks
            analytic = -skew(w @ b) @ dmu_c_dT(mu_a)[:, :6]
            dwb = np.zeros((3, 6))
            dw = dW_dT(w)
            for i in range(3):
                dwb += b[i] * dw[3 * i : 3 * i + 3, :]
            analytic = analytic + skew(mu_a) @ dwb
            fd = np.zeros((3, 6))
            for k in range(6):
                tau = np.zeros(6)
                tau[k] = FD_STEP
                pp = left_perturb(pose, tau)
                pm = left_perturb(pose, -tau)
                fp = np.cross(pp.transform(a), pp.rotation.matrix() @ b)
                fm = np.cross(pm.transform(a), pm.rotation.matrix() @ b)
                fd[:, k] = (fp - fm) / (2 * FD_STEP)
            denom = max(1e-8, float(np.max(np.abs(fd))))
            assert np.max(np.abs(analytic - fd)) / denom <= 1e-5
