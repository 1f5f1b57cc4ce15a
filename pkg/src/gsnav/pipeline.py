"""Dataset synthesis and timestamp-ordered estimator replay.

simulate_dataset turns a ScenarioConfig into an on-disk dataset tree.
run_pipeline replays a dataset in logical time through initialization,
per-frame photometric tracking and mapping, and per-epoch sliding-window
solves, writing estimate.tum, diagnostics.csv, tracking.csv, map.gsmap.
The replay is fully sequential and byte-deterministic by default; the
pipelined flag moves map optimization to a worker thread (not
bit-deterministic, results land whenever the worker commits).
"""

import math
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .camera import CameraIntrinsics
from .config import RunConfig, ScenarioConfig
from .earth import EnuAnchor, L1_WAVELENGTH
from .errors import (ConfigError, DataError, DegenerateView, InsufficientData,
                     NoOverlap)
from .fusion import (BiasWalkFactor, FactorGraph, GnssEpochFactor, GnssSigmas,
                     GsPoseFactor, ImuFactor, InitConfig, PriorFactor,
                     ReprojectionFactor, SolveReport, SolverConfig, Values,
                     initialize_system, marginalize, solve_window, write_tum)
from .gaussian_map import (DepthInit, GaussianMap, MotionThresholds,
                           motion_aware_prune, save_map, seed_from_frame)
from .geometry import Pose, Rot3
from .gnss import GnssEpoch, receiver_position_ecef, sd_pseudorange
from .images import gradient_mask, load_image
from .imu import GRAVITY_ENU, ImuNoise, preintegrate
from .mapper import (Keyframe, KeyframeWindow, MapperConfig, TrackerConfig,
                     DiagnosticsWriter, detect_extreme_motion,
                     gs_factor_variance, maintain_window, optimize_map,
                     should_register_keyframe, track_pose)
from .rasterizer import RenderOptions, render, visible_ids
from .sensor_sim import (DEFAULT_ROT_BC, Dataset, TrajectorySpec,
                         default_constellation, generate_trajectory,
                         street_corridor, synth_frames, synth_gnss, synth_imu,
                         write_dataset)
from .states import CamState, NavState


def snapshot_map(gmap: GaussianMap) -> GaussianMap:
    """Deep copy of the primitive arrays, generation, and RNG state."""
    out = GaussianMap()
    out.means = gmap.means.copy()
    out.quats = gmap.quats.copy()
    out.log_scales = gmap.log_scales.copy()
    out.logit_opacities = gmap.logit_opacities.copy()
    out.colors = gmap.colors.copy()
    out.birth_kf = gmap.birth_kf.copy()
    out.accum_grad = gmap.accum_grad.copy()
    out.accum_vis = gmap.accum_vis.copy()
    out.accum_radius = gmap.accum_radius.copy()
    out.generation = gmap.generation
    out.rng.bit_generator.state = gmap.rng.bit_generator.state
    return out


# ---------------------------------------------------------------------------
# simulation


def build_trajectory_spec(cfg: ScenarioConfig) -> TrajectorySpec:
    rates = dict(imu_hz=cfg.rate_imu_hz, gnss_hz=cfg.rate_gnss_hz,
                 cam_hz=cfg.rate_cam_hz, pitch=cfg.pitch, roll=cfg.roll)
    if cfg.waypoint_times:
        if len(cfg.waypoint_times) != len(cfg.waypoints):
            raise ConfigError("waypoint_times and waypoints disagree in length")
        return TrajectorySpec(np.asarray(cfg.waypoint_times, dtype=float),
                              np.asarray(cfg.waypoints, dtype=float),
                              stops=cfg.stops, **rates)
    if cfg.stops:
        raise ConfigError("stops require explicit waypoint_times")
    return TrajectorySpec.from_path(cfg.waypoints, cfg.speed,
                                    initial_hold=cfg.initial_hold, **rates)


def scenario_intrinsics(cfg: ScenarioConfig) -> CameraIntrinsics:
    return CameraIntrinsics(fx=cfg.cam_fx, fy=cfg.cam_fy, cx=cfg.cam_cx,
                            cy=cfg.cam_cy, width=cfg.cam_width,
                            height=cfg.cam_height, near=cfg.cam_near,
                            far=cfg.cam_far)


@dataclass
class SimSummary:
    root: Path
    duration: float
    n_epochs: int
    n_frames: int


def simulate_dataset(cfg: ScenarioConfig, out_dir) -> SimSummary:
    """Generate and write one dataset tree from a scenario description."""
    spec = build_trajectory_spec(cfg)
    truth = generate_trajectory(spec)
    anchor = EnuAnchor.from_geodetic(cfg.anchor_lat, cfg.anchor_lon,
                                     cfg.anchor_height)
    noise = None
    if cfg.accel_noise > 0.0 or cfg.gyro_noise > 0.0:
        noise = ImuNoise(gyro=cfg.gyro_noise, accel=cfg.accel_noise)
    imu = synth_imu(truth, bias_acc=cfg.bias_acc, bias_gyro=cfg.bias_gyro,
                    noise=noise, seed=cfg.seed + 1)
    gnss = synth_gnss(
        truth, anchor, default_constellation(cfg.n_sats),
        lever_arm=cfg.lever_arm, clock_drift={"G": cfg.clock_drift_g},
        sigma_pr=cfg.sigma_pseudorange, sigma_cp=cfg.sigma_carrier,
        sigma_dopp=cfg.sigma_doppler, outages=cfg.outages,
        drop_lowest=cfg.drop_lowest, seed=cfg.seed + 2,
        base_offset_enu=cfg.base_offset)
    xs = cfg.waypoints[:, 0]
    length = cfg.scene_length
    if length <= 0.0:
        length = float(xs.max() - xs.min()) + 30.0
    x_start = cfg.scene_x_start
    if math.isnan(x_start):
        x_start = float(xs.min()) - 10.0
    scene = street_corridor(length=length, width=cfg.scene_width,
                            wall_height=cfg.wall_height,
                            spacing=cfg.scene_spacing, n_boxes=cfg.n_boxes,
                            seed=cfg.seed + 4, x_start=x_start)
    intr = scenario_intrinsics(cfg)
    cam = CamState(t_bc=cfg.cam_t_bc, rot_bc=DEFAULT_ROT_BC)
    frames = synth_frames(truth, scene, intr, cam=cam,
                          brightness_amp=cfg.brightness_amp,
                          brightness_period=cfg.brightness_period,
                          seed=cfg.seed + 3, n_track_points=cfg.track_points,
                          track_sigma_px=cfg.track_sigma_px)
    root = write_dataset(out_dir, truth, imu, gnss, frames, scene,
                         config_text=cfg.dump())
    return SimSummary(root=Path(root),
                      duration=float(truth.times[-1] - truth.times[0]),
                      n_epochs=len(gnss.epochs), n_frames=len(frames.times))


# ---------------------------------------------------------------------------
# ambiguity arcs

def relabel_arcs(epochs: Sequence[GnssEpoch]) -> List[GnssEpoch]:
    """Suffix satellite ids with a continuity-arc index ("G03@1").

    An arc breaks whenever the satellite misses an epoch (outage epochs
    break every arc), matching the receiver losing carrier lock; each arc
    then carries its own integer-ambiguity unknown downstream.
    """
    live: Dict[str, int] = {}
    counts: Dict[str, int] = {}
    out: List[GnssEpoch] = []
    for ep in epochs:
        present = set(ep.sat_ids)
        for sid in list(live):
            if sid not in present:
                del live[sid]
        new_ids = []
        for sid in ep.sat_ids:
            if sid not in live:
                live[sid] = counts.get(sid, 0)
                counts[sid] = live[sid] + 1
            new_ids.append(f"{sid}@{live[sid]}")
        out.append(replace(ep, sat_ids=new_ids))
    return out


# ---------------------------------------------------------------------------
# landmark triangulation

_LM_MIN_DEPTH = 0.5
_LM_MAX_DEPTH = 200.0


def triangulate_midpoint(origins: np.ndarray, dirs: np.ndarray
                         ) -> Optional[np.ndarray]:
    """Least-squares point closest to all rays; None when ill-conditioned."""
    a = np.zeros((3, 3))
    b = np.zeros(3)
    for o, d in zip(origins, dirs):
        m = np.eye(3) - np.outer(d, d)
        a += m
        b += m @ o
    w = np.linalg.eigvalsh(a)
    if w[0] < 1e-6:
        return None
    return np.linalg.solve(a, b)


# ---------------------------------------------------------------------------
# replay

@dataclass
class RunResult:
    times: np.ndarray
    poses_wb: List[Pose]
    terminations: List[str]
    estimate_path: Path
    diagnostics_path: Path
    map_path: Path
    n_landmarks: int
    map_size: int


_DIAG_HEADER = ("epoch,t,n_sats,imu_residual,gnss_residual,cost_initial,"
                "cost_final,iterations,termination,map_size,n_landmarks,"
                "sigma2_gs")


class _MapWorker:
    """Serial background lane for map optimization in pipelined mode."""

    def __init__(self, enabled: bool):
        self.enabled = enabled
        self._thread: Optional[threading.Thread] = None
        self.lock = threading.Lock()

    def submit(self, fn) -> None:
        if not self.enabled:
            fn()
            return
        self.join()
        self._thread = threading.Thread(target=fn, daemon=True)
        self._thread.start()

    def join(self) -> None:
        if self._thread is not None:
            self._thread.join()
            self._thread = None


class Replay:
    """Sequential measurement replay over one dataset."""

    def __init__(self, dataset: Dataset, cfg: RunConfig, out_dir,
                 paced: bool = False, pipelined: bool = False):
        self.ds = dataset
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.paced = paced
        scen = (ScenarioConfig.load(dataset.config_text)
                if dataset.config_text else ScenarioConfig())
        self.intr = scenario_intrinsics(scen)
        self.t_bc = np.asarray(scen.cam_t_bc, dtype=float)
        self.rot_bc = DEFAULT_ROT_BC
        self.lever_arm = np.asarray(scen.lever_arm, dtype=float)
        self.imu_noise = ImuNoise(gyro=cfg.gyro_noise, accel=cfg.accel_noise,
                                  gyro_walk=cfg.gyro_walk,
                                  accel_walk=cfg.accel_walk)
        self.sigmas = GnssSigmas(dd_pseudorange=cfg.sigma_dd,
                                 sd_carrier=cfg.sigma_carrier,
                                 doppler=cfg.sigma_doppler)
        self.opts = RenderOptions(tile_size=cfg.tile_size)
        self.tracker_cfg = TrackerConfig(max_iterations=cfg.tracker_iterations,
                                         options=self.opts)
        self.mapper_cfg = MapperConfig(adc_interval=cfg.adc_interval,
                                       options=self.opts)
        self.motion_th = MotionThresholds(lambda_min=cfg.lambda_min,
                                          lambda_max=cfg.lambda_max)
        self.depth_model = DepthInit(seed=cfg.seed)

        raw = [ep.filtered(min_snr=cfg.min_snr,
                           min_elevation=cfg.min_elevation)
               for ep in dataset.epochs]
        self.epochs = relabel_arcs(raw)
        if len(self.epochs) < cfg.init_epochs + 1:
            raise DataError("dataset has fewer epochs than the init window")

        # estimator state; all navigation states live in the ENU frame of the
        # dataset's surveyed anchor so outputs compare directly against truth
        self.values = Values()
        self.factors: List = []
        self.window_navs: List[int] = []
        self.anchor = EnuAnchor.from_geodetic(scen.anchor_lat, scen.anchor_lon,
                                              scen.anchor_height)
        self.gmap = GaussianMap(seed=cfg.seed)
        self.window = KeyframeWindow(max_size=cfg.window_keyframes,
                                     lambda_isotropic=cfg.lambda_isotropic)
        self.brightness = (1.0, 0.0)
        self.recent_cam_poses: List[Pose] = []
        self.lm_obs: Dict[int, List[Tuple[int, np.ndarray]]] = {}
        self.worker = _MapWorker(pipelined)
        self.est_times: List[float] = []
        self.est_poses: List[Pose] = []
        self.terminations: List[str] = []
        self._diag_rows: List[str] = []
        self._track_writer: Optional[DiagnosticsWriter] = None
        self._next_frame = 0
        self._pending_gs: Optional[Tuple[np.ndarray, np.ndarray, float]] = None
        self._wall_start = 0.0

    # -- small lookups ------------------------------------------------------

    def _imu_index(self, t: float) -> int:
        i = int(np.searchsorted(self.ds.imu_times, t - 1e-9))
        if i >= len(self.ds.imu_times) or abs(self.ds.imu_times[i] - t) > 1e-6:
            raise DataError(f"no inertial sample at t={t:.6f}")
        return i

    def _preint(self, t0: float, t1: float, ba, bg):
        i0 = self._imu_index(t0)
        i1 = self._imu_index(t1)
        return preintegrate(self.ds.imu_times[i0:i1 + 1],
                            self.ds.imu_gyro[i0:i1 + 1],
                            self.ds.imu_accel[i0:i1 + 1],
                            bias_acc=ba, bias_gyro=bg, noise=self.imu_noise)

    def _predict(self, nav: NavState, t1: float) -> NavState:
        """Inertial dead-reckoning from a solved state to a later time."""
        if t1 <= nav.t + 1e-9:
            return nav
        pre = self._preint(nav.t, t1, nav.ba, nav.bg)
        g = np.asarray(GRAVITY_ENU, dtype=float)
        dt = pre.delta_t
        drot, dv, dp = pre.corrected(nav.ba, nav.bg)
        rot = nav.rot * drot
        v = nav.v + g * dt + nav.rot.rotate(dv)
        p = nav.p + nav.v * dt + 0.5 * g * dt * dt + nav.rot.rotate(dp)
        return NavState(p=p, rot=rot, v=v, ba=nav.ba.copy(), bg=nav.bg.copy(),
                        t=t1)

    def _nav(self, k: int) -> NavState:
        return self.values.get(("nav", k))

    def _nav_before(self, t: float) -> NavState:
        """Latest solved state at or before t (dead-reckoning base)."""
        best = self._nav(self.window_navs[0])
        for k in self.window_navs:
            nav = self._nav(k)
            if nav.t <= t + 1e-9:
                best = nav
            else:
                break
        return best

    def _pose_cw(self, nav: NavState) -> Pose:
        return (nav.pose_wb() * Pose(self.rot_bc, self.t_bc)).inverse()

    def _map_view(self) -> GaussianMap:
        if self.worker.enabled:
            with self.worker.lock:
                return snapshot_map(self.gmap)
        return self.gmap

    def _n_landmarks(self) -> int:
        return sum(1 for k in self.values.keys() if k[0] == "lm")

    # -- GNSS bookkeeping ---------------------------------------------------

    def _ensure_gnss_keys(self, epoch: GnssEpoch, nav: NavState) -> None:
        """Create missing ambiguity unknowns, seeded from the carrier."""
        rcv = receiver_position_ecef(self.anchor, nav.p, nav.rot.matrix(),
                                     self.lever_arm)
        for i, sid in enumerate(epoch.sat_ids):
            key = ("amb", sid)
            if key in self.values:
                continue
            sd0 = sd_pseudorange(rcv, epoch.base_ecef, epoch.sat_pos[i])
            n0 = float((epoch.sd_carrier[i] - sd0) / L1_WAVELENGTH)
            self.values.set(key, n0)
            self.factors.append(PriorFactor(
                key, n0, np.array([[1.0 / self.cfg.prior_sigma_amb]])))

    def _gnss_factor(self, k: int, epoch: GnssEpoch
                     ) -> Optional[GnssEpochFactor]:
        if epoch.n_sats < 2:
            return None
        self._ensure_gnss_keys(epoch, self._nav(k))
        f = GnssEpochFactor(("nav", k), epoch, self.anchor, self.lever_arm,
                            sigmas=self.sigmas, huber_dd=self.cfg.huber_dd)
        self.factors.append(f)
        return f

    # -- feature landmarks --------------------------------------------------

    def _tracks_at(self, t: float) -> Optional[np.ndarray]:
        for key, rows in self.ds.tracks.items():
            if abs(key - t) < 1e-6:
                return rows
        return None

    def _ray(self, nav: NavState, uv: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        pose_wc = self._pose_cw(nav).inverse()
        d_c = np.array([(uv[0] - self.intr.cx) / self.intr.fx,
                        (uv[1] - self.intr.cy) / self.intr.fy, 1.0])
        d_w = pose_wc.rotation.rotate(d_c / np.linalg.norm(d_c))
        return pose_wc.translation, d_w

    def _try_triangulate(self, fid: int) -> bool:
        obs = [(k, uv) for k, uv in self.lm_obs[fid]
               if ("nav", k) in self.values]
        if len(obs) < 2:
            return False
        origins, dirs = [], []
        for k, uv in obs:
            o, d = self._ray(self._nav(k), uv)
            origins.append(o)
            dirs.append(d)
        origins = np.array(origins)
        baseline = float(np.linalg.norm(origins[-1] - origins[0]))
        if baseline < self.cfg.min_baseline:
            return False
        point = triangulate_midpoint(origins, np.array(dirs))
        if point is None:
            return False
        for k, _ in obs:
            local = self._pose_cw(self._nav(k)).transform(point)
            if not _LM_MIN_DEPTH <= local[2] <= _LM_MAX_DEPTH:
                return False
        self.values.set(("lm", fid), point)
        for k, uv in obs:
            self.factors.append(ReprojectionFactor(
                ("nav", k), ("lm", fid), uv, self.intr, self.t_bc, self.rot_bc,
                sigma_px=self.cfg.sigma_px, huber_px=self.cfg.huber_px))
        return True

    def _add_feature_factors(self, k: int, t: float) -> None:
        rows = self._tracks_at(t)
        if rows is None or rows.size == 0:
            return
        fresh = 0
        for fid_f, u, v in rows:
            fid = int(fid_f)
            uv = np.array([u, v])
            self.lm_obs.setdefault(fid, []).append((k, uv))
            if ("lm", fid) in self.values:
                self.factors.append(ReprojectionFactor(
                    ("nav", k), ("lm", fid), uv, self.intr, self.t_bc,
                    self.rot_bc, sigma_px=self.cfg.sigma_px,
                    huber_px=self.cfg.huber_px))
            elif (fresh < self.cfg.max_new_landmarks
                  and self._n_landmarks() < self.cfg.max_landmarks):
                if self._try_triangulate(fid):
                    fresh += 1

    # -- tracking / mapping -------------------------------------------------

    def _register_keyframe(self, frame_idx: int, image, mask, pose_cw) -> None:
        self.worker.join()
        kf = Keyframe(id=frame_idx, pose=pose_cw, image=image, mask=mask,
                      brightness=self.brightness)
        if len(self.gmap) > 0:
            rend = render(self.gmap, pose_cw, self.intr,
                          brightness=self.brightness, options=self.opts)
            need = rend.t_acc < 0.5
        else:
            need = np.ones(image.shape[:2], dtype=bool)
        if need.any():
            try:
                kf.inserted_ids = seed_from_frame(
                    self.gmap, image, pose_cw, self.intr, self.depth_model,
                    birth_keyframe=frame_idx, stride=self.cfg.seed_stride,
                    mask=need)
            except EmptyMask:
                pass  # covered view: keyframe carries no new primitives
        maintain_window(self.window, kf, self.gmap, self.intr,
                        theta_evict=self.cfg.theta_evict, options=self.opts)
        self.worker.submit(self._optimize_map)

    def _optimize_map(self) -> None:
        if not self.window.keyframes or len(self.gmap) == 0:
            return
        if not self.worker.enabled:
            optimize_map(self.window, self.gmap, self.intr,
                         iterations=self.cfg.map_iterations,
                         config=self.mapper_cfg)
            return
        with self.worker.lock:
            work = snapshot_map(self.gmap)
        optimize_map(self.window, work, self.intr,
                     iterations=self.cfg.map_iterations,
                     config=self.mapper_cfg)
        with self.worker.lock:
            self.gmap = work

    def _prune_check(self) -> int:
        if len(self.recent_cam_poses) < 2 or len(self.gmap) == 0:
            return 0
        kf = self.window.latest()
        if kf is None:
            return 0
        try:
            trigger, translations = detect_extreme_motion(
                self.recent_cam_poses, self.motion_th)
        except InsufficientData:
            return 0
        if not trigger:
            return 0
        self.worker.join()
        rend = render(self.gmap, kf.pose, self.intr,
                      brightness=kf.brightness,
                      options=RenderOptions(tile_size=self.cfg.tile_size,
                                            collect_rays=True))
        latest_ids = visible_ids(self.gmap, kf.pose, self.intr, self.opts)
        return motion_aware_prune(self.gmap, translations, latest_ids,
                                  rend.rays, self.motion_th)

    def _process_frame(self, frame_idx: int) -> None:
        t_f = float(self.ds.frame_times[frame_idx])
        image = load_image(self.ds.frame_paths[frame_idx])
        mask = gradient_mask(image)
        nav_f = self._predict(self._nav_before(t_f), t_f)
        pose_cw = self._pose_cw(nav_f)
        loss, iters, sigma2 = math.inf, 0, 0.0
        gmap = self._map_view()
        if len(gmap) > 0 and self.window.keyframes:
            try:
                res = track_pose(image, mask, pose_cw, gmap, self.intr,
                                 brightness=self.brightness,
                                 config=self.tracker_cfg, window=self.window)
                loss, iters, sigma2 = (res.final_loss, res.iterations,
                                       res.sigma2_3dgs)
                # a tracked pose that cannot explain the image photometrically
                # is less trustworthy than dead reckoning; keep the predicted
                # pose and leave the brightness model untouched
                if loss <= self.cfg.gs_gate_loss:
                    pose_cw = res.pose
                    self.brightness = res.brightness
            except DegenerateView:
                pass
        self.recent_cam_poses.append(pose_cw)
        if len(self.recent_cam_poses) > self.motion_th.window_len:
            self.recent_cam_poses.pop(0)
        pruned = self._prune_check() if self.cfg.use_pruning else 0
        is_kf = should_register_keyframe(pose_cw, self.window.latest(),
                                         self.gmap, self.intr,
                                         theta_cov=self.cfg.theta_cov,
                                         options=self.opts)
        if is_kf:
            self._register_keyframe(frame_idx, image, mask, pose_cw)
        if self._track_writer is not None:
            self._track_writer.write(frame_idx,
                                     loss if math.isfinite(loss) else 0.0,
                                     iters, sigma2, len(self.gmap), pruned,
                                     is_kf)
        self._pending_gs = (image, mask, loss)

    def _consume_frames(self, until_t: float) -> None:
        """Track and map every frame with time <= until_t, in order."""
        self._pending_gs = None
        while (self._next_frame < len(self.ds.frame_times)
               and self.ds.frame_times[self._next_frame] <= until_t + 1e-9):
            idx = self._next_frame
            self._next_frame += 1
            if not self.cfg.use_gs:
                continue
            self._process_frame(idx)
            if abs(self.ds.frame_times[idx] - until_t) > 1e-6:
                self._pending_gs = None

    # -- window solve -------------------------------------------------------

    def _solve(self) -> SolveReport:
        graph = FactorGraph()
        graph.values = self.values
        graph.factors = list(self.factors)
        report = solve_window(
            graph, SolverConfig(max_iterations=self.cfg.solver_iterations))
        self.terminations.append(report.termination)
        return report

    def _slide(self) -> None:
        while len(self.window_navs) > self.cfg.window_states:
            oldest = self.window_navs.pop(0)
            drop = [("nav", oldest)]
            drop_set = set(drop)
            survivors = [f for f in self.factors
                         if not any(k in drop_set for k in f.keys)]
            referenced = {k for f in survivors for k in f.keys}
            for key in self.values.keys():
                if key in drop_set or key in referenced:
                    continue
                if key[0] in ("nav", "clk"):
                    continue
                drop.append(key)
            prior, untouched = marginalize(self.factors, self.values, drop)
            self.factors = untouched
            if prior.keys:
                self.factors.append(prior)
            for key in drop:
                del self.values._data[key]
                if key[0] == "lm":
                    self.lm_obs.pop(key[1], None)

    # -- diagnostics --------------------------------------------------------

    def _diag(self, k: int, t: float, n_sats: int, imu_res: float,
              gnss_res: float, report: SolveReport, sigma2: float) -> None:
        self._diag_rows.append(
            f"{k},{t:.12g},{n_sats},{imu_res:.12g},{gnss_res:.12g},"
            f"{report.initial_cost:.12g},{report.final_cost:.12g},"
            f"{report.accepted_steps},{report.termination},"
            f"{len(self.gmap)},{self._n_landmarks()},{sigma2:.12g}")

    # -- phases -------------------------------------------------------------

    def _initialize(self) -> None:
        cfg = self.cfg
        m = cfg.init_epochs
        init_eps = self.epochs[:m]
        t_end = init_eps[-1].t
        i1 = self._imu_index(t_end)
        sel = [i for i, t in enumerate(self.ds.frame_times)
               if t <= t_end + 1e-9]
        frames = [load_image(self.ds.frame_paths[i]) for i in sel]
        frame_times = [float(self.ds.frame_times[i]) for i in sel]
        init = initialize_system(
            init_eps, self.ds.imu_times[:i1 + 1], self.ds.imu_gyro[:i1 + 1],
            self.ds.imu_accel[:i1 + 1], frames, frame_times, self.intr,
            CamState(t_bc=self.t_bc, rot_bc=self.rot_bc), self.depth_model,
            lever_arm=self.lever_arm,
            config=InitConfig(seed_stride=cfg.seed_stride))
        # initialization anchors its ENU frame at the first position fix;
        # re-express everything in the dataset's surveyed anchor frame so
        # estimates, map, and truth share one world
        r_fix = self.anchor.r_ecef_to_enu @ init.anchor.r_ecef_to_enu.T
        nav_states = [
            NavState(p=self.anchor.to_enu(init.anchor.from_enu(nav.p)),
                     rot=Rot3.from_matrix(r_fix @ nav.rot.matrix()),
                     v=r_fix @ nav.v, ba=nav.ba, bg=nav.bg, t=nav.t)
            for nav in init.nav_states]

        for k, nav in enumerate(nav_states):
            self.values.set(("nav", k), nav)
            self.window_navs.append(k)
        sqrt_prior = np.diag(np.concatenate([
            np.full(3, 1.0 / cfg.prior_sigma_pos),
            np.full(3, 1.0 / cfg.prior_sigma_rot),
            np.full(3, 1.0 / cfg.prior_sigma_vel),
            np.full(3, 1.0 / cfg.prior_sigma_ba),
            np.full(3, 1.0 / cfg.prior_sigma_bg)]))
        self.factors.append(PriorFactor(("nav", 0), nav_states[0],
                                        sqrt_prior))
        for const, drift in sorted(init.gnss_state.clock_drift.items()):
            self.values.set(("clk", const), float(drift))
            self.factors.append(PriorFactor(
                ("clk", const), float(drift),
                np.array([[1.0 / cfg.prior_sigma_clk]])))

        imu_fs: Dict[int, ImuFactor] = {}
        gnss_fs: Dict[int, GnssEpochFactor] = {}
        for k in range(1, m):
            pre = self._preint(init_eps[k - 1].t, init_eps[k].t,
                               nav_states[k - 1].ba, nav_states[k - 1].bg)
            f = ImuFactor(("nav", k - 1), ("nav", k), pre)
            imu_fs[k] = f
            self.factors.append(f)
            self.factors.append(BiasWalkFactor(("nav", k - 1), ("nav", k),
                                               pre.cov_bias))
        for k, ep in enumerate(init_eps):
            f = self._gnss_factor(k, ep)
            if f is not None:
                gnss_fs[k] = f
        report = self._solve()

        for k, ep in enumerate(init_eps):
            nav = self._nav(k)
            self.est_times.append(ep.t)
            self.est_poses.append(nav.pose_wb())
            imu_r = (float(np.linalg.norm(imu_fs[k].linearize(self.values)[0]))
                     if k in imu_fs else 0.0)
            gnss_r = (float(np.linalg.norm(
                gnss_fs[k].linearize(self.values)[0])) if k in gnss_fs else 0.0)
            self._diag(k, ep.t, ep.n_sats, imu_r, gnss_r, report, 0.0)

        if cfg.use_gs and sel:
            self._bootstrap_map(init_eps, sel, frames)
        # init-window frames are consumed by the bootstrap (at solved poses),
        # so replay starts at the first frame past the init span
        self._next_frame = 0
        while (self._next_frame < len(self.ds.frame_times)
               and self.ds.frame_times[self._next_frame] <= t_end + 1e-9):
            self._next_frame += 1

    def _bootstrap_map(self, init_eps, sel, frames) -> None:
        """Seed and optimize the map over the init window at solved poses.

        The first seeding has no map to take a median depth from; stand in
        with the median depth of feature tracks triangulated across the init
        window so primitives start near the true surfaces instead of the
        blind startup fallback.
        """
        obs: Dict[int, List[Tuple[int, np.ndarray]]] = {}
        for k, ep in enumerate(init_eps):
            rows = self._tracks_at(ep.t)
            if rows is None:
                continue
            for fid_f, u, v in rows:
                obs.setdefault(int(fid_f), []).append((k, np.array([u, v])))
        depths = []
        for lst in obs.values():
            if len(lst) < 2:
                continue
            origins, dirs = [], []
            for k, uv in lst:
                o, d = self._ray(self._nav(k), uv)
                origins.append(o)
                dirs.append(d)
            origins = np.array(origins)
            if (np.linalg.norm(origins[-1] - origins[0])
                    < self.cfg.min_baseline):
                continue
            point = triangulate_midpoint(origins, np.array(dirs))
            if point is None:
                continue
            zs = [self._pose_cw(self._nav(k)).transform(point)[2]
                  for k, _ in lst]
            if all(_LM_MIN_DEPTH <= z <= _LM_MAX_DEPTH for z in zs):
                depths.append(float(np.median(zs)))
        if depths:
            self.depth_model.fallback_depth = float(np.median(depths))
        ep_at = {round(ep.t * 1e6): k for k, ep in enumerate(init_eps)}
        for j, i in enumerate(sel):
            k = ep_at.get(round(float(self.ds.frame_times[i]) * 1e6))
            if k is None:
                continue
            self._register_keyframe(i, frames[j], gradient_mask(frames[j]),
                                    self._pose_cw(self._nav(k)))

    def _process_epoch(self, k: int) -> None:
        cfg = self.cfg
        ep = self.epochs[k]
        prev = self._nav(k - 1)
        if self.paced:
            wait = (ep.t - self.epochs[0].t) - (time.monotonic()
                                                - self._wall_start)
            if wait > 0.0:
                time.sleep(wait)
        self._consume_frames(ep.t)

        pre = self._preint(prev.t, ep.t, prev.ba, prev.bg)
        nav_pred = self._predict(prev, ep.t)
        self.values.set(("nav", k), nav_pred)
        self.window_navs.append(k)
        imu_f = ImuFactor(("nav", k - 1), ("nav", k), pre)
        self.factors.append(imu_f)
        self.factors.append(BiasWalkFactor(("nav", k - 1), ("nav", k),
                                           pre.cov_bias))
        gnss_f = self._gnss_factor(k, ep)
        self._add_feature_factors(k, ep.t)

        sigma2 = 0.0
        if cfg.use_gs and self._pending_gs is not None and len(self.gmap) > 0 \
                and self.window.keyframes:
            image, mask, track_loss = self._pending_gs
            if track_loss <= cfg.gs_gate_loss:
                if cfg.use_weighting:
                    sigma2 = gs_factor_variance(self.window, self._map_view())
                else:
                    sigma2 = cfg.sigma2_fixed
                try:
                    self.factors.append(GsPoseFactor(
                        ("nav", k), snapshot_map(self._map_view()), image,
                        mask, self.intr, self.t_bc, self.rot_bc,
                        self.brightness, sigma2, budget=cfg.pixel_budget,
                        options=self.opts))
                except DegenerateView:
                    sigma2 = 0.0

        imu_r = float(np.linalg.norm(imu_f.linearize(self.values)[0]))
        gnss_r = (float(np.linalg.norm(gnss_f.linearize(self.values)[0]))
                  if gnss_f is not None else 0.0)
        report = self._solve()
        nav = self._nav(k)
        self.est_times.append(ep.t)
        self.est_poses.append(nav.pose_wb())
        self._diag(k, ep.t, ep.n_sats, imu_r, gnss_r, report, sigma2)
        self._slide()

    def run(self) -> RunResult:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        if self.cfg.use_gs:
            self._track_writer = DiagnosticsWriter(self.out_dir / "tracking.csv")
        try:
            self._wall_start = time.monotonic()
            self._initialize()
            for k in range(self.cfg.init_epochs, len(self.epochs)):
                self._process_epoch(k)
            self.worker.join()
        finally:
            if self._track_writer is not None:
                self._track_writer.close()
        est_path = self.out_dir / "estimate.tum"
        write_tum(est_path, self.est_times, self.est_poses)
        diag_path = self.out_dir / "diagnostics.csv"
        with open(diag_path, "w") as fh:
            fh.write(_DIAG_HEADER + "\n")
            for row in self._diag_rows:
                fh.write(row + "\n")
        map_path = self.out_dir / "map.gsmap"
        save_map(self.gmap, map_path)
        return RunResult(times=np.array(self.est_times),
                         poses_wb=self.est_poses,
                         terminations=self.terminations,
                         estimate_path=est_path, diagnostics_path=diag_path,
                         map_path=map_path, n_landmarks=self._n_landmarks(),
                         map_size=len(self.gmap))


def run_pipeline(dataset: Dataset, cfg: RunConfig, out_dir,
                 paced: bool = False, pipelined: bool = False) -> RunResult:
    return Replay(dataset, cfg, out_dir, paced=paced,
                  pipelined=pipelined).run()
