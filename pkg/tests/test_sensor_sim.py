"""Simulator checks: analytic trajectory derivatives, sensor models against
independent closed forms, determinism, and the dataset round trip."""

import math

import numpy as np
import pytest

from gsnav.camera import CameraIntrinsics
from gsnav.earth import EnuAnchor, L1_WAVELENGTH
from gsnav.errors import DataError, DegenerateWaypoints, NoOverlap
from gsnav.fusion import GnssEpochFactor, Values
from gsnav.geometry import Pose, Rot3
from gsnav.gnss import sd_pseudorange, receiver_position_ecef
from gsnav.images import load_image, quantize
from gsnav.imu import GRAVITY_ENU, ImuNoise, preintegrate
from gsnav.rasterizer import RenderOptions, render
from gsnav.sensor_sim import (ApeResult, Constellation, DEFAULT_ROT_BC,
                              TrajectorySpec, default_constellation,
                              evaluate_ape, generate_trajectory, load_dataset,
                              read_tum, street_corridor, synth_frames,
                              synth_gnss, synth_imu, write_dataset)
from gsnav.states import CamState

ANCHOR = EnuAnchor.from_geodetic(47.3977, 8.5456, 488.0)
K48 = CameraIntrinsics(fx=30.0, fy=30.0, cx=24.0, cy=24.0,
                       width=48, height=48)


def line_spec(**kw):
    return TrajectorySpec(times=[0.0, 10.0],
                          positions=[[0.0, 0.0, 1.5], [20.0, 0.0, 1.5]],
                          **kw)


def curvy_spec():
    return TrajectorySpec(
        times=[0.0, 10.0, 20.0, 30.0],
        positions=[[0.0, 0.0, 1.0], [30.0, 5.0, 1.4],
                   [60.0, -5.0, 0.8], [90.0, 0.0, 1.0]])


class TestTrajectory:
    def test_two_waypoints_straight_constant_velocity(self):
        truth = generate_trajectory(line_spec())
        v_expect = np.array([2.0, 0.0, 0.0])
        assert np.allclose(truth.velocities, v_expect, atol=1e-9)
        assert np.allclose(truth.accelerations, 0.0, atol=1e-9)
        expect = np.array([0.0, 0.0, 1.5]) + truth.times[:, None] * v_expect
        assert np.allclose(truth.positions, expect, atol=1e-9)

    def test_stop_holds_position_with_zero_velocity(self):
        spec = TrajectorySpec(times=[0.0, 8.0, 20.0],
                              positions=[[0.0, 0.0, 1.0], [16.0, 0.0, 1.0],
                                         [16.0, 24.0, 1.0]],
                              stops=((8.0, 12.0),))
        truth = generate_trajectory(spec)
        inside = (truth.times >= 8.0) & (truth.times <= 12.0)
        assert np.all(inside.sum() > 100)
        assert np.allclose(truth.positions[inside], [16.0, 0.0, 1.0],
                           atol=1e-12)
        assert np.allclose(truth.velocities[inside], 0.0, atol=1e-12)
        assert np.allclose(truth.accelerations[inside], 0.0, atol=1e-12)

    def test_velocity_is_position_derivative(self):
        spec = curvy_spec()
        truth = generate_trajectory(spec)
        p = truth.positions
        dt = 1.0 / truth.imu_hz
        # fourth-order central stencil; skip windows straddling a knot,
        # where the jerk-and-above derivatives jump
        fd = (-p[4:] + 8 * p[3:-1] - 8 * p[1:-3] + p[:-4]) / (12 * dt)
        centers = truth.times[2:-2]
        clear = np.all(np.abs(centers[:, None] - spec.times[None, :])
                       > 2.5 * dt, axis=1)
        err = np.max(np.abs(fd[clear] - truth.velocities[2:-2][clear]))
        assert err < 1e-6

    def test_acceleration_is_velocity_derivative(self):
        spec = curvy_spec()
        truth = generate_trajectory(spec)
        v = truth.velocities
        dt = 1.0 / truth.imu_hz
        fd = (v[2:] - v[:-2]) / (2 * dt)
        centers = truth.times[1:-1]
        clear = np.all(np.abs(centers[:, None] - spec.times[None, :])
                       > 1.5 * dt, axis=1)
        assert np.max(np.abs(fd[clear]
                             - truth.accelerations[1:-1][clear])) < 1e-4

    def test_yaw_follows_velocity(self):
        truth = generate_trajectory(curvy_spec())
        speed = np.hypot(truth.velocities[:, 0], truth.velocities[:, 1])
        for i in range(0, len(truth), 97):
            if speed[i] < 0.1:
                continue
            fwd = truth.rot(i).matrix() @ np.array([1.0, 0.0, 0.0])
            head = truth.velocities[i] / np.linalg.norm(truth.velocities[i])
            assert abs(fwd[0] * head[1] - fwd[1] * head[0]) < 1e-9

    def test_body_rates_match_orientation_increments(self):
        truth = generate_trajectory(curvy_spec())
        dt = 1.0 / truth.imu_hz
        for i in range(0, len(truth) - 1, 53):
            rel = (truth.rot(i).inverse() * truth.rot(i + 1)).log() / dt
            mid = 0.5 * (truth.omega_body[i] + truth.omega_body[i + 1])
            assert np.max(np.abs(rel - mid)) < 1e-4

    def test_pitch_roll_trim(self):
        truth = generate_trajectory(line_spec(pitch=0.05, roll=-0.02))
        r = truth.rot(0).matrix()
        expect = (Rot3.exp(np.array([0, 0, 0.0]))
                  * Rot3.exp(np.array([0, 0.05, 0]))
                  * Rot3.exp(np.array([-0.02, 0, 0]))).matrix()
        assert np.allclose(r, expect, atol=1e-12)

    def test_from_path_constant_speed_timing(self):
        spec = TrajectorySpec.from_path(
            [[0, 0, 1], [30, 0, 1], [30, 40, 1]], speed=2.0)
        assert np.allclose(spec.times, [0.0, 15.0, 35.0])

    def test_rate_decimation(self):
        truth = generate_trajectory(line_spec())
        assert truth.gnss_indices().size == 10
        assert truth.cam_indices().size == 100
        with pytest.raises(DegenerateWaypoints):
            truth.indices_at_rate(7.0)

    def test_degenerate_specs_rejected(self):
        with pytest.raises(DegenerateWaypoints):
            generate_trajectory(TrajectorySpec(times=[0.0],
                                               positions=[[0, 0, 0]]))
        with pytest.raises(DegenerateWaypoints):
            generate_trajectory(TrajectorySpec(
                times=[0.0, 5.0, 5.0],
                positions=[[0, 0, 0], [1, 0, 0], [2, 0, 0]]))
        with pytest.raises(DegenerateWaypoints):
            generate_trajectory(TrajectorySpec(
                times=[0.0, 10.0], positions=[[0, 0, 0], [5, 0, 0]],
                stops=((2.0, 4.0),)))
        with pytest.raises(DegenerateWaypoints):
            generate_trajectory(TrajectorySpec(
                times=[0.0, 5.0, 20.0],
                positions=[[0, 0, 0], [5, 0, 0], [10, 0, 0]],
                stops=((0.0, 7.0),)))
        with pytest.raises(DegenerateWaypoints):
            generate_trajectory(TrajectorySpec(
                times=[0.0, 5.0], positions=[[1, 2, 3], [1, 2, 3]]))


class TestImu:
    def test_stationary_measures_gravity_reaction(self):
        spec = TrajectorySpec(times=[0.0, 6.0],
                              positions=[[5.0, 1.0, 2.0], [5.0, 7.0, 2.0]],
                              stops=((0.0, 4.0),))
        truth = generate_trajectory(spec)
        _, gyro, accel = synth_imu(truth, seed=3)
        hold = truth.times <= 3.5
        assert np.allclose(accel[hold], [0.0, 0.0, 9.81], atol=1e-12)
        assert np.allclose(gyro[hold], 0.0, atol=1e-12)

    def test_biases_enter_additively(self):
        truth = generate_trajectory(line_spec())
        ba = np.array([0.02, -0.01, 0.03])
        bg = np.array([-0.001, 0.002, 0.0005])
        _, g0, a0 = synth_imu(truth)
        _, g1, a1 = synth_imu(truth, bias_acc=ba, bias_gyro=bg)
        assert np.allclose(g1 - g0, bg, atol=1e-15)
        assert np.allclose(a1 - a0, ba, atol=1e-15)

    def test_circular_motion_centripetal(self):
        radius, speed = 25.0, 5.0
        ang = np.linspace(0.0, 2 * np.pi, 33)
        pts = np.stack([radius * np.cos(ang), radius * np.sin(ang),
                        np.full_like(ang, 1.0)], axis=1)
        arc = 2 * np.pi * radius / 32
        times = np.arange(33) * (arc / speed)
        truth = generate_trajectory(TrajectorySpec(times=times,
                                                   positions=pts))
        _, _, accel = synth_imu(truth)
        centripetal = speed ** 2 / radius
        sel = (truth.times > times[4]) & (truth.times < times[-4])
        lateral = np.hypot(accel[sel, 0], accel[sel, 1])
        assert np.max(np.abs(lateral - centripetal)) / centripetal < 0.05
        # turning left: acceleration points along body +y
        assert np.all(accel[sel, 1] > 0.9 * centripetal)

    def test_seed_determinism(self):
        truth = generate_trajectory(line_spec())
        noise = ImuNoise()
        _, g0, a0 = synth_imu(truth, noise=noise, seed=11)
        _, g1, a1 = synth_imu(truth, noise=noise, seed=11)
        _, g2, _ = synth_imu(truth, noise=noise, seed=12)
        assert np.array_equal(g0, g1) and np.array_equal(a0, a1)
        assert not np.array_equal(g0, g2)

    def test_noise_free_integration_tracks_truth(self):
        spec = TrajectorySpec.from_path(
            [[0, 0, 1.5], [40, 0, 1.5], [80, 10, 1.5], [120, 10, 1.5]],
            speed=2.0)
        truth = generate_trajectory(spec)
        times, gyro, accel = synth_imu(truth)
        step = int(truth.imu_hz)
        rot = truth.rot(0)
        v = truth.velocities[0].copy()
        p = truth.positions[0].copy()
        worst = 0.0
        for k0 in range(0, len(truth) - step, step):
            k1 = k0 + step
            pre = preintegrate(times[k0:k1 + 1], gyro[k0:k1 + 1],
                               accel[k0:k1 + 1])
            dt = pre.delta_t
            r_mat = rot.matrix()
            p = p + v * dt + 0.5 * GRAVITY_ENU * dt * dt \
                + r_mat @ pre.delta_pos
            v = v + GRAVITY_ENU * dt + r_mat @ pre.delta_vel
            rot = rot * pre.delta_rot
            worst = max(worst, np.linalg.norm(p - truth.positions[k1]))
        assert worst < 1e-3


class TestGnss:
    LEVER = np.array([0.1, -0.2, 0.9])

    def make(self, **kw):
        truth = generate_trajectory(line_spec())
        sim = synth_gnss(truth, ANCHOR, default_constellation(8),
                         lever_arm=self.LEVER, clock_drift={"G": 6.0},
                         seed=5, **kw)
        return truth, sim

    def test_noise_free_epochs_fit_the_measurement_factor(self):
        truth, sim = self.make()
        amb = sim.first_arc_ambiguities()
        for e_idx in (0, 4, 9):
            epoch = sim.epochs[e_idx]
            i = truth.index_of_time(epoch.t)
            values = Values()
            values.set(("nav", 0), truth.nav_state(i))
            for s in epoch.sat_ids:
                values.set(("amb", s), amb[s])
            values.set(("clk", "G"), 6.0)
            factor = GnssEpochFactor(("nav", 0), epoch, ANCHOR, self.LEVER)
            r, _ = factor.linearize(values)
            assert np.max(np.abs(r)) < 1e-9

    def test_outage_yields_empty_epochs_and_new_arcs(self):
        truth, sim = self.make(outages=((3.0, 5.0),))
        for epoch in sim.epochs:
            if 3.0 <= epoch.t <= 5.0:
                assert epoch.n_sats == 0
            else:
                assert epoch.n_sats == 8
        for sat, arcs in sim.ambiguity_arcs.items():
            assert len(arcs) == 2
            assert arcs[0][0] == 0 and arcs[1][0] == 6
        # post-outage epochs stay consistent with the second-arc integers
        epoch = sim.epochs[7]
        i = truth.index_of_time(epoch.t)
        values = Values()
        values.set(("nav", 0), truth.nav_state(i))
        for s in epoch.sat_ids:
            values.set(("amb", s), float(sim.ambiguity_arcs[s][1][1]))
        values.set(("clk", "G"), 6.0)
        factor = GnssEpochFactor(("nav", 0), epoch, ANCHOR, self.LEVER)
        r, _ = factor.linearize(values)
        assert np.max(np.abs(r)) < 1e-9

    def test_ambiguities_are_integers(self):
        _, sim = self.make()
        for arcs in sim.ambiguity_arcs.values():
            for _, n in arcs:
                assert n == int(n)

    def test_pseudorange_noise_statistics(self):
        spec = TrajectorySpec(times=[0.0, 100.0],
                              positions=[[0, 0, 1], [50, 0, 1]],
                              gnss_hz=10.0)
        truth = generate_trajectory(spec)
        sigma = 0.5
        sim = synth_gnss(truth, ANCHOR, default_constellation(8),
                         lever_arm=self.LEVER, sigma_pr=sigma, seed=9)
        errs = []
        for epoch in sim.epochs:
            i = truth.index_of_time(epoch.t)
            rcv = receiver_position_ecef(
                ANCHOR, truth.positions[i], truth.rot(i).matrix(),
                self.LEVER)
            sd = np.array([sd_pseudorange(rcv, epoch.base_ecef, s)
                           for s in epoch.sat_pos])
            piv = epoch.pivot_index()
            clean = sd - sd[piv]
            diff = epoch.dd_pseudorange - clean
            errs.extend(np.delete(diff, piv))
        errs = np.array(errs)
        assert errs.size == 1000 * 7
        expect = math.sqrt(2.0) * sigma  # own noise plus the pivot's
        assert abs(np.std(errs) - expect) / expect < 0.10

    def test_carrier_equals_range_plus_integer_cycles(self):
        truth, sim = self.make()
        amb = sim.first_arc_ambiguities()
        epoch = sim.epochs[2]
        i = truth.index_of_time(epoch.t)
        rcv = receiver_position_ecef(ANCHOR, truth.positions[i],
                                     truth.rot(i).matrix(), self.LEVER)
        for j, s in enumerate(epoch.sat_ids):
            sd = sd_pseudorange(rcv, epoch.base_ecef, epoch.sat_pos[j])
            assert abs(epoch.sd_carrier[j] - sd
                       - L1_WAVELENGTH * amb[s]) < 1e-9

    def test_drop_lowest_masks_low_elevation(self):
        truth, sim = self.make(drop_lowest=3)
        full = default_constellation(8)
        for epoch in sim.epochs:
            assert epoch.n_sats == 5
            assert np.min(epoch.elevation) > np.sort(full.el_deg)[2] - 5.0

    def test_determinism(self):
        _, sim0 = self.make(sigma_pr=0.5, sigma_cp=0.01, sigma_dopp=0.2)
        _, sim1 = self.make(sigma_pr=0.5, sigma_cp=0.01, sigma_dopp=0.2)
        for e0, e1 in zip(sim0.epochs, sim1.epochs):
            assert np.array_equal(e0.dd_pseudorange, e1.dd_pseudorange)
            assert np.array_equal(e0.sd_carrier, e1.sd_carrier)
            assert np.array_equal(e0.doppler, e1.doppler)
            assert np.array_equal(e0.snr, e1.snr)


class TestScene:
    def test_corridor_is_opaque_where_surfaces_are(self):
        scene = street_corridor(length=40.0, width=8.0, wall_height=4.0,
                                spacing=1.0, n_boxes=2, seed=7)
        assert len(scene) > 500
        alpha = 1.0 / (1.0 + np.exp(-scene.logit_opacities))
        assert np.min(alpha) >= 0.7
        cam = CamState(rot_bc=DEFAULT_ROT_BC)
        truth = generate_trajectory(line_spec())
        pose_cw = cam.camera_pose_cw(truth.nav_state(0))
        out = render(scene, pose_cw, K48, options=RenderOptions())
        t_acc = out.t_acc
        assert np.mean(t_acc[36:, :] > 0.9) > 0.9     # ground band
        assert np.mean(t_acc[8:40, :6] > 0.9) > 0.9   # left wall band
        assert np.mean(t_acc[8:40, 42:] > 0.9) > 0.9  # right wall band

    def test_seeded_scene_reproducible(self):
        a = street_corridor(length=20.0, spacing=1.5, n_boxes=2, seed=4)
        b = street_corridor(length=20.0, spacing=1.5, n_boxes=2, seed=4)
        assert np.array_equal(a.means, b.means)
        assert np.array_equal(a.colors, b.colors)
        assert np.array_equal(a.logit_opacities, b.logit_opacities)


def parked_truth(cam_hz=2.0):
    spec = TrajectorySpec(times=[0.0, 12.0],
                          positions=[[0.0, 0.0, 1.5], [24.0, 0.0, 1.5]],
                          stops=((0.0, 6.0),), cam_hz=cam_hz)
    return generate_trajectory(spec)


class TestFrames:
    SCENE = street_corridor(length=40.0, width=8.0, wall_height=4.0,
                            spacing=1.0, n_boxes=3, seed=7)

    def test_same_pose_same_image(self):
        truth = parked_truth()
        sim = synth_frames(truth, self.SCENE, K48, n_track_points=40,
                           track_sigma_px=0.0, seed=1)
        assert np.array_equal(sim.images[0], sim.images[4])
        assert not np.array_equal(sim.images[0], sim.images[-1])

    def test_brightness_drift_scales_intensity(self):
        truth = parked_truth()
        sim = synth_frames(truth, self.SCENE, K48, brightness_amp=0.08,
                           brightness_period=20.0, seed=1,
                           n_track_points=10)
        img0 = sim.images[0]
        mask = (img0 > 0.05) & (img0 < 0.9)
        for f in (2, 6, 10):
            if float(truth.times[truth.cam_indices()[f]]) > 6.0:
                break
            ratio = np.mean(sim.images[f][mask]) / np.mean(img0[mask])
            expect = sim.brightness[f] / sim.brightness[0]
            assert abs(ratio - expect) / expect < 0.01

    def test_tracks_are_exact_projections_when_noise_free(self):
        truth = parked_truth()
        cam = CamState(rot_bc=DEFAULT_ROT_BC)
        sim = synth_frames(truth, self.SCENE, K48, cam=cam,
                           n_track_points=60, track_sigma_px=0.0, seed=2)
        f = len(sim.times) - 1
        i = truth.cam_indices()[f]
        pose_cw = cam.camera_pose_cw(truth.nav_state(i))
        by_id = {int(r[0]): r[1:] for r in sim.tracks[f]}
        assert by_id
        for gid, uv in by_id.items():
            row = np.where(sim.track_ids == gid)[0][0]
            p_c = pose_cw.transform(sim.track_points[row][None, :])[0]
            assert p_c[2] > 0
            u = K48.fx * p_c[0] / p_c[2] + K48.cx
            v = K48.fy * p_c[1] / p_c[2] + K48.cy
            assert abs(u - uv[0]) < 1e-9 and abs(v - uv[1]) < 1e-9

    def test_track_noise_and_determinism(self):
        truth = parked_truth()
        a = synth_frames(truth, self.SCENE, K48, n_track_points=30,
                         track_sigma_px=0.3, seed=6)
        b = synth_frames(truth, self.SCENE, K48, n_track_points=30,
                         track_sigma_px=0.3, seed=6)
        for ta, tb in zip(a.tracks, b.tracks):
            assert np.array_equal(ta, tb)


class TestApe:
    def poses(self, n=20, yaw=0.0, east=0.0):
        times = np.arange(n) * 0.1
        rot = Rot3.exp(np.array([0.0, 0.0, yaw]))
        return times, [Pose(rot, np.array([0.5 * t + east, 2.0, 0.0]))
                       for t in times]

    def test_identical_trajectories_score_zero(self):
        t, p = self.poses()
        res = evaluate_ape(t, p, t, p)
        assert res.translation_rmse == 0.0
        assert res.rotation_rmse_deg < 1e-9

    def test_one_meter_east_offset(self):
        t, truth = self.poses()
        _, est = self.poses(east=1.0)
        res = evaluate_ape(t, est, t, truth)
        assert abs(res.translation_rmse - 1.0) < 1e-12
        assert np.allclose(res.errors_enu, [1.0, 0.0, 0.0])
        assert res.rotation_rmse_deg < 1e-9

    def test_one_degree_yaw_offset(self):
        t, truth = self.poses()
        _, est = self.poses(yaw=math.radians(1.0))
        res = evaluate_ape(t, est, t, truth)
        assert abs(res.rotation_rmse_deg - 1.0) < 1e-9
        assert res.translation_rmse < 1e-12

    def test_association_window(self):
        t, p = self.poses()
        res = evaluate_ape(t + 0.004, p, t, p)
        assert res.translation_rmse == 0.0
        with pytest.raises(NoOverlap):
            evaluate_ape(t + 100.0, p, t, p)

    def test_no_overlap_on_empty(self):
        t, p = self.poses()
        with pytest.raises(NoOverlap):
            evaluate_ape(np.array([]), [], t, p)


class TestDataset:
    def build(self, tmp_path):
        spec = TrajectorySpec(times=[0.0, 4.0],
                              positions=[[0.0, 0.0, 1.5], [8.0, 0.0, 1.5]],
                              cam_hz=1.0)
        truth = generate_trajectory(spec)
        imu = synth_imu(truth, bias_acc=[0.02, 0, -0.01], noise=ImuNoise(),
                        seed=2)
        gnss = synth_gnss(truth, ANCHOR, default_constellation(6),
                          lever_arm=[0.1, -0.2, 0.9], sigma_pr=0.3,
                          outages=((2.0, 2.5),), seed=3)
        scene = street_corridor(length=24.0, width=8.0, wall_height=3.0,
                                spacing=1.5, n_boxes=1, seed=5, x_start=-2.0)
        frames = synth_frames(truth, scene, K48, n_track_points=50,
                              track_sigma_px=0.2, seed=4)
        root = write_dataset(tmp_path / "ds", truth, imu, gnss, frames,
                             scene, "rate_gnss_hz = 1\n")
        return truth, imu, gnss, frames, scene, root

    def test_round_trip(self, tmp_path):
        truth, imu, gnss, frames, scene, root = self.build(tmp_path)
        ds = load_dataset(root)
        assert np.allclose(ds.imu_times, imu[0], atol=1e-9)
        assert np.allclose(ds.imu_gyro, imu[1], rtol=1e-10, atol=1e-12)
        assert np.allclose(ds.imu_accel, imu[2], rtol=1e-10, atol=1e-12)
        assert len(ds.epochs) == len(gnss.epochs)
        for a, b in zip(ds.epochs, gnss.epochs):
            assert a.sat_ids == b.sat_ids
            assert abs(a.t - b.t) < 1e-9
            assert np.allclose(a.dd_pseudorange, b.dd_pseudorange,
                               rtol=1e-10, atol=1e-7)
            assert np.allclose(a.sd_carrier, b.sd_carrier,
                               rtol=1e-10, atol=1e-7)
            assert np.allclose(a.sat_pos, b.sat_pos, rtol=1e-12, atol=1e-3)
        empty = [e for e in ds.epochs if e.n_sats == 0]
        assert len(empty) == 1
        assert len(ds.frame_paths) == len(frames.images)
        img = load_image(ds.frame_paths[1])  # floats, already quantized
        assert np.array_equal(quantize(img), quantize(frames.images[1]))
        t1 = ds.frame_times[1]
        assert t1 in ds.tracks
        assert ds.tracks[t1].shape == frames.tracks[1].shape
        assert np.allclose(ds.tracks[t1][:, 1:], frames.tracks[1][:, 1:],
                           atol=1e-9)
        tt, tp = ds.truth_times, ds.truth_poses
        assert tt.size == len(truth)
        k = len(truth) // 2
        assert np.allclose(tp[k].translation, truth.positions[k], atol=1e-8)
        ang = np.linalg.norm((tp[k].rotation.inverse()
                              * truth.rot(k)).log())
        assert ang < 1e-7
        assert ds.scene_path.exists()
        assert ds.config_text.startswith("rate_gnss_hz")

    def test_truth_file_matches_ape_zero(self, tmp_path):
        truth, _, _, _, _, root = self.build(tmp_path)
        tt, tp = read_tum(root / "truth.tum")
        est_t = truth.times[::50]
        est_p = [truth.pose_wb(i) for i in range(0, len(truth), 50)]
        res = evaluate_ape(est_t, est_p, tt, tp)
        assert res.translation_rmse < 1e-7
        assert res.rotation_rmse_deg < 1e-5

    def test_missing_dataset_raises(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path / "nope")
