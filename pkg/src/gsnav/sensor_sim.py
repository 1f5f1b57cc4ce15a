"""Deterministic ground-truth world and measurement generation.

Trajectories are C2 quintic-Hermite splines through timed ENU waypoints with
optional hold (stop) intervals; yaw follows the horizontal velocity (held
through stops), so scenarios should enter and leave a stop along the same
heading.  Sensors derive from the dense truth: specific force
R_WB^T (a_W - g) + b_a, body rates from the analytic yaw rate, GNSS epochs
from a static satellite shell differenced against a fixed base, and camera
frames rendered from an opaque ground-truth Gaussian scene.  Every stream
takes its own seed and regenerates bit-identically.
"""

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .camera import CameraIntrinsics
from .earth import EnuAnchor, L1_WAVELENGTH
from .errors import DataError, DegenerateWaypoints, NoOverlap
from .gaussian_map import GaussianMap, save_map
from .geometry import Pose, Rot3
from .gnss import (GnssEpoch, elevation_deg, predicted_doppler,
                   predicted_sd_carrier, receiver_position_ecef,
                   sd_pseudorange)
from .imu import GRAVITY_ENU, ImuNoise
from .images import save_image
from .rasterizer import RenderOptions, DEFAULT_OPTIONS, render
from .states import CamState, NavState

# camera z forward along body x, camera x to body -y, camera y down
DEFAULT_ROT_BC = Rot3.exp(np.array([1.0, -1.0, 1.0]) / math.sqrt(3.0)
                          * (-2.0 * math.pi / 3.0))

MIN_YAW_SPEED = 0.05  # m/s; below this the heading holds its last value


# ---------------------------------------------------------------------------
# trajectory

@dataclass(frozen=True)
class TrajectorySpec:
    """Timed ENU waypoints, hold intervals, sensor rates, and attitude trim.

    Each stop (t0, t1) must start exactly at a waypoint time and end before
    the next waypoint; a stop starting at the last waypoint extends the
    trajectory span.  Speed comes from the waypoint timing; from_path builds
    the timing for a constant target speed.
    """

    times: np.ndarray
    positions: np.ndarray
    stops: Tuple[Tuple[float, float], ...] = ()
    imu_hz: float = 100.0
    gnss_hz: float = 1.0
    cam_hz: float = 10.0
    pitch: float = 0.0
    roll: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "times",
                           np.asarray(self.times, dtype=float).reshape(-1))
        object.__setattr__(self, "positions",
                           np.asarray(self.positions,
                                      dtype=float).reshape(-1, 3))
        object.__setattr__(self, "stops",
                           tuple((float(a), float(b)) for a, b in self.stops))

    @staticmethod
    def from_path(points, speed: float, start_time: float = 0.0,
                  initial_hold: float = 0.0, **kw) -> "TrajectorySpec":
        """Constant-speed timing over a polyline, optional hold at the start."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        if speed <= 0.0:
            raise DegenerateWaypoints("speed must be positive")
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        t0 = start_time + max(initial_hold, 0.0)
        times = np.concatenate([[start_time], t0 + np.cumsum(seg / speed)])
        stops = ((start_time, t0),) if initial_hold > 0.0 else ()
        return TrajectorySpec(times, pts, stops=stops, **kw)


@dataclass
class TruthTrajectory:
    """Dense IMU-rate ground truth with analytic derivatives."""

    times: np.ndarray            # (n,)
    positions: np.ndarray        # (n, 3)
    velocities: np.ndarray       # (n, 3)
    accelerations: np.ndarray    # (n, 3)
    quats_wb: np.ndarray         # (n, 4) wxyz
    omega_body: np.ndarray       # (n, 3)
    imu_hz: float
    gnss_hz: float
    cam_hz: float

    def __len__(self) -> int:
        return self.times.size

    def rot(self, i: int) -> Rot3:
        return Rot3(self.quats_wb[i])

    def pose_wb(self, i: int) -> Pose:
        return Pose(self.rot(i), self.positions[i])

    def nav_state(self, i: int, ba=None, bg=None) -> NavState:
        z = np.zeros(3)
        return NavState(p=self.positions[i].copy(), rot=self.rot(i),
                        v=self.velocities[i].copy(),
                        ba=z if ba is None else np.asarray(ba, float),
                        bg=z if bg is None else np.asarray(bg, float),
                        t=float(self.times[i]))

    def indices_at_rate(self, hz: float) -> np.ndarray:
        step = self.imu_hz / hz
        if abs(step - round(step)) > 1e-9:
            raise DegenerateWaypoints(
                f"rate {hz} Hz does not divide the IMU rate {self.imu_hz}")
        return np.arange(0, len(self), int(round(step)))

    def gnss_indices(self) -> np.ndarray:
        return self.indices_at_rate(self.gnss_hz)

    def cam_indices(self) -> np.ndarray:
        return self.indices_at_rate(self.cam_hz)

    def index_of_time(self, t: float) -> int:
        i = int(round((t - self.times[0]) * self.imu_hz))
        if i < 0 or i >= len(self) or abs(self.times[i] - t) > 1e-6:
            raise DegenerateWaypoints(f"time {t} is not on the sample grid")
        return i


def _quintic_eval(p0, v0, a0, p1, v1, a1, h, s):
    """Quintic Hermite on full endpoint (p, v, a) data; s in [0, 1]."""
    s2 = s * s
    s3 = s2 * s
    s4 = s3 * s
    s5 = s4 * s
    b = np.stack([1 - 10 * s3 + 15 * s4 - 6 * s5,
                  s - 6 * s3 + 8 * s4 - 3 * s5,
                  0.5 * s2 - 1.5 * s3 + 1.5 * s4 - 0.5 * s5,
                  10 * s3 - 15 * s4 + 6 * s5,
                  -4 * s3 + 7 * s4 - 3 * s5,
                  0.5 * s3 - s4 + 0.5 * s5], axis=1)
    db = np.stack([-30 * s2 + 60 * s3 - 30 * s4,
                   1 - 18 * s2 + 32 * s3 - 15 * s4,
                   s - 4.5 * s2 + 6 * s3 - 2.5 * s4,
                   30 * s2 - 60 * s3 + 30 * s4,
                   -12 * s2 + 28 * s3 - 15 * s4,
                   1.5 * s2 - 4 * s3 + 2.5 * s4], axis=1)
    ddb = np.stack([-60 * s + 180 * s2 - 120 * s3,
                    -36 * s + 96 * s2 - 60 * s3,
                    1 - 9 * s + 18 * s2 - 10 * s3,
                    60 * s - 180 * s2 + 120 * s3,
                    -24 * s + 84 * s2 - 60 * s3,
                    3 * s - 12 * s2 + 10 * s3], axis=1)
    ctrl = np.stack([p0, h * v0, h * h * a0,
                     p1, h * v1, h * h * a1])      # (6, 3)
    return b @ ctrl, (db @ ctrl) / h, (ddb @ ctrl) / (h * h)


def _build_knots(spec: TrajectorySpec):
    t = spec.times
    p = spec.positions
    if t.size < 2 or p.shape[0] != t.size:
        raise DegenerateWaypoints("need >= 2 timed waypoints")
    if np.any(np.diff(t) <= 0):
        raise DegenerateWaypoints("waypoint times must strictly increase")

    stops = sorted(spec.stops)
    for k, (a, b) in enumerate(stops):
        if b <= a:
            raise DegenerateWaypoints(f"stop ({a}, {b}) has no duration")
        if k and a < stops[k - 1][1]:
            raise DegenerateWaypoints("stop intervals overlap")
        if not np.any(np.abs(t - a) < 1e-9):
            raise DegenerateWaypoints(
                f"stop start {a} is not a waypoint time")
        inside = (t > a + 1e-9) & (t < b - 1e-9)
        after = t[t > a + 1e-9]
        if np.any(inside) or (after.size and after[0] < b - 1e-9):
            raise DegenerateWaypoints(
                f"waypoint falls inside stop ({a}, {b})")

    stop_start = {a: b for a, b in stops}
    knot_t: List[float] = []
    knot_p: List[np.ndarray] = []
    seg_stop: List[bool] = []
    for i in range(t.size):
        knot_t.append(float(t[i]))
        knot_p.append(p[i])
        hold = next((b for a, b in stop_start.items()
                     if abs(t[i] - a) < 1e-9), None)
        if hold is not None:
            if i + 1 < t.size and t[i + 1] <= hold + 1e-9:
                raise DegenerateWaypoints(
                    "stop must end before the next waypoint")
            seg_stop.append(True)
            knot_t.append(float(hold))
            knot_p.append(p[i])
        if i + 1 < t.size:
            seg_stop.append(False)
    kt = np.array(knot_t)
    kp = np.stack(knot_p)
    moving = [not s for s in seg_stop]
    for j, m in enumerate(moving):
        if m and np.linalg.norm(kp[j + 1] - kp[j]) < 1e-9:
            raise DegenerateWaypoints(
                f"zero-length moving segment at t={kt[j]}; use a stop")
    return kt, kp, seg_stop


def _knot_derivatives(kt, kp, seg_stop):
    """Catmull-Rom velocities, then accelerations from the velocities.

    Knots touching a stop segment rest (v = a = 0); terminal moving knots
    take the one-sided chord slope with zero acceleration.
    """
    n = kt.size
    v = np.zeros((n, 3))
    free = np.zeros(n, dtype=bool)
    for j in range(n):
        left = seg_stop[j - 1] if j > 0 else None
        right = seg_stop[j] if j < n - 1 else None
        if left is True or right is True:
            continue  # rest at stop boundaries
        if left is None and right is None:
            continue
        if left is None:
            v[j] = (kp[j + 1] - kp[j]) / (kt[j + 1] - kt[j])
        elif right is None:
            v[j] = (kp[j] - kp[j - 1]) / (kt[j] - kt[j - 1])
        else:
            v[j] = (kp[j + 1] - kp[j - 1]) / (kt[j + 1] - kt[j - 1])
            free[j] = True
    a = np.zeros((n, 3))
    for j in range(n):
        if free[j] and 0 < j < n - 1:
            a[j] = (v[j + 1] - v[j - 1]) / (kt[j + 1] - kt[j - 1])
    return v, a


def generate_trajectory(spec: TrajectorySpec) -> TruthTrajectory:
    """Dense IMU-rate poses, velocities, and accelerations.

    Yaw tracks atan2(v_n, v_e)... measured from east about up; pitch/roll are
    the constant trim angles from the spec.  Heading holds its last moving
    value wherever horizontal speed drops below MIN_YAW_SPEED.
    """
    kt, kp, seg_stop = _build_knots(spec)
    kv, ka = _knot_derivatives(kt, kp, seg_stop)

    span = kt[-1] - kt[0]
    n = int(round(span * spec.imu_hz))
    if n < 2:
        raise DegenerateWaypoints("trajectory shorter than two IMU samples")
    times = kt[0] + np.arange(n) / spec.imu_hz

    pos = np.empty((n, 3))
    vel = np.empty((n, 3))
    acc = np.empty((n, 3))
    seg = np.clip(np.searchsorted(kt, times, side="right") - 1, 0,
                  kt.size - 2)
    for j in range(kt.size - 1):
        sel = seg == j
        if not np.any(sel):
            continue
        if seg_stop[j]:
            pos[sel] = kp[j]
            vel[sel] = 0.0
            acc[sel] = 0.0
        else:
            h = kt[j + 1] - kt[j]
            s = (times[sel] - kt[j]) / h
            pos[sel], vel[sel], acc[sel] = _quintic_eval(
                kp[j], kv[j], ka[j], kp[j + 1], kv[j + 1], ka[j + 1], h, s)

    speed_xy = np.hypot(vel[:, 0], vel[:, 1])
    moving = speed_xy >= MIN_YAW_SPEED
    yaw_raw = np.arctan2(vel[:, 1], vel[:, 0])
    if np.any(moving):
        idx = np.where(moving)[0]
        last = np.full(n, -1)
        last[idx] = idx
        last = np.maximum.accumulate(last)
        take = np.where(last >= 0, last, idx[0])
        yaw = yaw_raw[take]
    else:
        yaw = np.zeros(n)
    yaw_rate = np.zeros(n)
    den = speed_xy[moving] ** 2
    yaw_rate[moving] = (vel[moving, 0] * acc[moving, 1]
                        - vel[moving, 1] * acc[moving, 0]) / den

    trim = Rot3.exp(np.array([0.0, spec.pitch, 0.0])) * Rot3.exp(
        np.array([spec.roll, 0.0, 0.0]))
    trim_t = trim.matrix().T
    quats = np.empty((n, 4))
    omega = np.empty((n, 3))
    for i in range(n):
        quats[i] = (Rot3.exp(np.array([0.0, 0.0, yaw[i]])) * trim).quat
        omega[i] = trim_t @ np.array([0.0, 0.0, yaw_rate[i]])
    return TruthTrajectory(times=times, positions=pos, velocities=vel,
                           accelerations=acc, quats_wb=quats,
                           omega_body=omega, imu_hz=spec.imu_hz,
                           gnss_hz=spec.gnss_hz, cam_hz=spec.cam_hz)


# ---------------------------------------------------------------------------
# inertial stream

def synth_imu(truth: TruthTrajectory, bias_acc=None, bias_gyro=None,
              noise: Optional[ImuNoise] = None, seed: int = 0,
              gravity=GRAVITY_ENU):
    """IMU samples at the dense truth rate: (times, gyro, accel).

    Specific force is R_WB^T (a_W - g) + b_a plus white noise at the
    density-times-sqrt(rate) per-sample sigma; rates are omega_B + b_g plus
    noise.  noise=None means noise-free.  Gyro noise is drawn before accel
    noise, so the stream is one fixed function of the seed.
    """
    ba = np.zeros(3) if bias_acc is None else np.asarray(bias_acc, float)
    bg = np.zeros(3) if bias_gyro is None else np.asarray(bias_gyro, float)
    g = np.asarray(gravity, dtype=float)
    n = len(truth)
    accel = np.empty((n, 3))
    for i in range(n):
        r_wb = Rot3(truth.quats_wb[i]).matrix()
        accel[i] = r_wb.T @ (truth.accelerations[i] - g)
    gyro = truth.omega_body + bg
    accel += ba
    rng = np.random.default_rng(seed)
    sg = noise.gyro * math.sqrt(truth.imu_hz) if noise else 0.0
    sa = noise.accel * math.sqrt(truth.imu_hz) if noise else 0.0
    if sg > 0.0:
        gyro = gyro + rng.normal(scale=sg, size=(n, 3))
    if sa > 0.0:
        accel = accel + rng.normal(scale=sa, size=(n, 3))
    return truth.times.copy(), gyro, accel


# ---------------------------------------------------------------------------
# gnss stream

@dataclass(frozen=True)
class Constellation:
    """Static satellites on a shell, fixed az/el as seen from the anchor."""

    ids: Tuple[str, ...]
    az_deg: np.ndarray
    el_deg: np.ndarray
    shell_m: float = 26.0e6

    def __post_init__(self):
        object.__setattr__(self, "az_deg",
                           np.asarray(self.az_deg, dtype=float).reshape(-1))
        object.__setattr__(self, "el_deg",
                           np.asarray(self.el_deg, dtype=float).reshape(-1))

    @property
    def n(self) -> int:
        return len(self.ids)

    def positions_ecef(self, anchor: EnuAnchor) -> np.ndarray:
        az = np.deg2rad(self.az_deg)
        el = np.deg2rad(self.el_deg)
        los = np.stack([np.cos(el) * np.sin(az), np.cos(el) * np.cos(az),
                        np.sin(el)], axis=1)
        return np.array([anchor.from_enu(self.shell_m * u) for u in los])


def default_constellation(n: int = 8) -> Constellation:
    layout = [(20, 65), (85, 40), (150, 30), (210, 55), (275, 35), (340, 48),
              (45, 25), (120, 72), (250, 62), (310, 28), (175, 58), (15, 33)]
    if not 1 <= n <= len(layout):
        raise DegenerateWaypoints(f"constellation size {n} out of range")
    az, el = zip(*layout[:n])
    ids = tuple(f"G{k + 1:02d}" for k in range(n))
    return Constellation(ids, np.array(az, float), np.array(el, float))


@dataclass
class GnssSim:
    epochs: List[GnssEpoch]
    ambiguity_arcs: Dict[str, List[Tuple[int, int]]]  # sat -> [(epoch, N)]
    clock_drift: Dict[str, float]

    def first_arc_ambiguities(self) -> Dict[str, float]:
        return {s: float(arcs[0][1])
                for s, arcs in self.ambiguity_arcs.items() if arcs}


def synth_gnss(truth: TruthTrajectory, anchor: EnuAnchor,
               constellation: Constellation, lever_arm=None,
               clock_drift: Optional[Mapping[str, float]] = None,
               sigma_pr: float = 0.0, sigma_cp: float = 0.0,
               sigma_dopp: float = 0.0,
               outages: Sequence[Tuple[float, float]] = (),
               drop_lowest: int = 0, seed: int = 0,
               base_offset_enu=(-40.0, 25.0, 2.0),
               snr_base: float = 45.0, snr_slope: float = 10.0,
               snr_jitter: float = 1.5) -> GnssSim:
    """GNSS-rate epoch stream differenced against a fixed base receiver.

    Epochs inside an outage window carry zero satellites; drop_lowest
    removes that many lowest-elevation satellites from every epoch (urban
    masking).  Carrier ambiguities are integer constants per satellite arc
    and are redrawn when a satellite returns after an absence.  Pseudorange
    noise enters per satellite before differencing, so DD rows carry the
    pivot's noise like real double differences.
    """
    lever = np.zeros(3) if lever_arm is None else np.asarray(lever_arm, float)
    drift = {"G": 6.0} if clock_drift is None else dict(clock_drift)
    rng = np.random.default_rng(seed)
    base = anchor.from_enu(np.asarray(base_offset_enu, dtype=float))
    sat_pos_all = constellation.positions_ecef(anchor)

    epochs: List[GnssEpoch] = []
    arcs: Dict[str, List[Tuple[int, int]]] = {s: [] for s in constellation.ids}
    live_amb: Dict[str, int] = {}
    for e_idx, i in enumerate(truth.gnss_indices()):
        t = float(truth.times[i])
        if any(a <= t <= b for a, b in outages):
            live_amb.clear()
            epochs.append(GnssEpoch(
                t=t, base_ecef=base, sat_ids=[],
                sat_pos=np.zeros((0, 3)), dd_pseudorange=np.zeros(0),
                sd_carrier=np.zeros(0), doppler=np.zeros(0),
                elevation=np.zeros(0), snr=np.zeros(0)))
            continue
        nav_r = Rot3(truth.quats_wb[i]).matrix()
        rcv = receiver_position_ecef(anchor, truth.positions[i], nav_r, lever)
        v_ecef = anchor.rotate_from_enu(truth.velocities[i])
        elev = np.array([elevation_deg(rcv, s, anchor) for s in sat_pos_all])
        keep = np.argsort(elev)[drop_lowest:] if drop_lowest > 0 \
            else np.arange(constellation.n)
        keep = np.sort(keep)

        ids, sats, els = [], [], []
        for k in keep:
            ids.append(constellation.ids[k])
            sats.append(sat_pos_all[k])
            els.append(elev[k])
        for s in list(live_amb):
            if s not in ids:
                del live_amb[s]  # arc broken; new integer on return
        for s in ids:
            if s not in live_amb:
                live_amb[s] = int(rng.integers(-5000, 5000))
                arcs[s].append((e_idx, live_amb[s]))

        m = len(ids)
        sd = np.array([sd_pseudorange(rcv, base, s) for s in sats])
        noisy = sd + (rng.normal(scale=sigma_pr, size=m) if sigma_pr > 0.0
                      else 0.0)
        order = sorted(range(m), key=lambda j: (-els[j], ids[j]))
        pivot = order[0]
        dd = noisy - noisy[pivot]
        cp = np.array([predicted_sd_carrier(rcv, base, sats[j],
                                            live_amb[ids[j]])
                       for j in range(m)])
        if sigma_cp > 0.0:
            cp = cp + rng.normal(scale=sigma_cp, size=m)
        con_drift = np.array([drift.get(s[0], 0.0) for s in ids])
        dopp = np.array([predicted_doppler(rcv, v_ecef, sats[j],
                                           con_drift[j])
                         for j in range(m)])
        if sigma_dopp > 0.0:
            dopp = dopp + rng.normal(scale=sigma_dopp, size=m)
        snr = snr_base - snr_slope * (90.0 - np.array(els)) / 90.0
        if snr_jitter > 0.0:
            snr = snr + rng.normal(scale=snr_jitter, size=m)
        epochs.append(GnssEpoch(t=t, base_ecef=base, sat_ids=ids,
                                sat_pos=np.array(sats),
                                dd_pseudorange=dd, sd_carrier=cp,
                                doppler=dopp, elevation=np.array(els),
                                snr=snr))
    return GnssSim(epochs=epochs, ambiguity_arcs=arcs, clock_drift=drift)


# ---------------------------------------------------------------------------
# ground-truth scene

def _surface_grid(rng, gmap, origin, u_axis, v_axis, nu, nv, spacing,
                  base_colors, stripe_axis=0, stripe_every=4,
                  color_jitter=0.16, logit=2.5):
    """Tile a rectangle with flat, surface-aligned opaque gaussians.

    Splats are thin along the surface normal so rays terminate at the
    surface instead of averaging through a fog of isotropic blobs; striped,
    jittered colors give the photometric terms gradients to pull on.
    """
    origin = np.asarray(origin, dtype=float)
    u_axis = np.asarray(u_axis, dtype=float)
    v_axis = np.asarray(v_axis, dtype=float)
    iu, iv = np.meshgrid(np.arange(nu), np.arange(nv), indexing="ij")
    iu = iu.ravel()
    iv = iv.ravel()
    pts = (origin[None, :] + iu[:, None] * spacing * u_axis[None, :]
           + iv[:, None] * spacing * v_axis[None, :])
    stripe = ((iu if stripe_axis == 0 else iv) // stripe_every) % len(
        base_colors)
    colors = np.array(base_colors, dtype=float)[stripe]
    colors = np.clip(colors + rng.normal(scale=color_jitter,
                                         size=colors.shape), 0.02, 0.98)
    n = pts.shape[0]
    # local axes (u, v, normal) -> scale axes (x, y, z): thin along normal
    normal = np.cross(u_axis, v_axis)
    normal /= np.linalg.norm(normal)
    rot = Rot3.from_matrix(np.column_stack([
        u_axis / np.linalg.norm(u_axis),
        np.cross(normal, u_axis) / np.linalg.norm(np.cross(normal, u_axis)),
        normal]))
    quats = np.tile(rot.quat, (n, 1))
    log_s = np.column_stack([
        np.full(n, math.log(0.45 * spacing)),
        np.full(n, math.log(0.45 * spacing)),
        np.full(n, math.log(0.05 * spacing))])
    log_s += rng.normal(scale=0.05, size=(n, 3))
    gmap.add(pts, quats, log_s,
             np.full(n, float(logit)) + rng.uniform(0, 0.8, n),
             colors, np.zeros(n))


def street_corridor(length: float = 120.0, width: float = 10.0,
                    wall_height: float = 6.0, spacing: float = 0.75,
                    n_boxes: int = 10, seed: int = 0,
                    x_start: float = -10.0) -> GaussianMap:
    """Ground plane plus two textured walls and box obstacles along +east.

    Every surface is tiled with opacity >= 0.85 gaussians so the scene
    renders opaque; stripe patterns give the photometric terms gradients to
    pull on.
    """
    rng = np.random.default_rng(seed)
    gmap = GaussianMap(seed=seed)
    nu = int(round(length / spacing))
    half = width / 2.0
    ground_palette = [(0.20, 0.19, 0.17), (0.58, 0.56, 0.50),
                      (0.34, 0.37, 0.42)]
    wall_a = [(0.72, 0.44, 0.28), (0.88, 0.72, 0.50), (0.42, 0.26, 0.18),
              (0.66, 0.54, 0.35)]
    wall_b = [(0.32, 0.42, 0.64), (0.62, 0.70, 0.82), (0.20, 0.26, 0.46),
              (0.48, 0.55, 0.70)]
    _surface_grid(rng, gmap, (x_start, -half, 0.0), (1, 0, 0), (0, 1, 0),
                  nu, int(round(width / spacing)) + 1, spacing,
                  ground_palette, stripe_axis=0, stripe_every=3)
    nz = int(round(wall_height / spacing)) + 1
    _surface_grid(rng, gmap, (x_start, -half, 0.0), (1, 0, 0), (0, 0, 1),
                  nu, nz, spacing, wall_a, stripe_axis=0, stripe_every=4)
    _surface_grid(rng, gmap, (x_start, half, 0.0), (1, 0, 0), (0, 0, 1),
                  nu, nz, spacing, wall_b, stripe_axis=0, stripe_every=5)

    box_palette = [(0.72, 0.20, 0.18), (0.18, 0.55, 0.25),
                   (0.80, 0.70, 0.20), (0.25, 0.25, 0.70)]
    for b in range(n_boxes):
        cx = x_start + 8.0 + rng.uniform(0, max(length - 16.0, 1.0))
        # curbside clutter only: keep the travel lane (y near 0) clear
        side = 1.0 if b % 2 == 0 else -1.0
        cy = side * rng.uniform(max(half - 2.8, 1.0), max(half - 1.2, 1.4))
        sx, sy, sz = rng.uniform(0.8, 2.0, 3)
        color = [box_palette[b % len(box_palette)]]
        s2 = spacing * 0.8
        nx, ny_, nzb = (max(int(round(d / s2)), 2) for d in (sx, sy, sz))
        faces = [
            ((cx - sx / 2, cy - sy / 2, sz), (1, 0, 0), (0, 1, 0), nx, ny_),
            ((cx - sx / 2, cy - sy / 2, 0.0), (1, 0, 0), (0, 0, 1), nx, nzb),
            ((cx - sx / 2, cy + sy / 2, 0.0), (1, 0, 0), (0, 0, 1), nx, nzb),
            ((cx - sx / 2, cy - sy / 2, 0.0), (0, 1, 0), (0, 0, 1), ny_, nzb),
            ((cx + sx / 2, cy - sy / 2, 0.0), (0, 1, 0), (0, 0, 1), ny_, nzb),
        ]
        for origin, u, v, a, c in faces:
            _surface_grid(rng, gmap, origin, u, v, a, c, s2, color,
                          stripe_every=2, color_jitter=0.05)
    return gmap


# ---------------------------------------------------------------------------
# camera stream

@dataclass
class FrameSim:
    times: np.ndarray
    images: List[np.ndarray]
    brightness: np.ndarray                  # (n,) multiplicative gain a(t)
    track_points: np.ndarray                # (k, 3) anchor positions
    track_ids: np.ndarray                   # (k,) int ids
    tracks: List[np.ndarray]                # per frame (m, 3): id, u, v


def synth_frames(truth: TruthTrajectory, scene: GaussianMap,
                 intr: CameraIntrinsics, cam: Optional[CamState] = None,
                 brightness_amp: float = 0.0,
                 brightness_period: float = 30.0, seed: int = 0,
                 n_track_points: int = 120, track_sigma_px: float = 0.3,
                 track_min_depth: float = 1.0, margin_px: float = 2.0,
                 options: RenderOptions = DEFAULT_OPTIONS) -> FrameSim:
    """Camera-rate rendered frames plus projected ground-truth tracks.

    Brightness gain a(t) = 1 + amp sin(2 pi t / period) multiplies the
    rendered image.  Track anchors are a seeded subset of scene primitives;
    per-frame pixels are exact projections plus seeded noise, dropped when
    behind the camera, too close, or outside the margin.
    """
    cam = cam or CamState(rot_bc=DEFAULT_ROT_BC)
    rng = np.random.default_rng(seed)
    k = min(n_track_points, len(scene))
    track_rows = np.sort(rng.choice(len(scene), size=k, replace=False))
    points = scene.means[track_rows].copy()
    ids = track_rows.astype(np.int64)

    idx = truth.cam_indices()
    times = truth.times[idx].copy()
    images: List[np.ndarray] = []
    gains = np.empty(idx.size)
    tracks: List[np.ndarray] = []
    for f, i in enumerate(idx):
        t = float(truth.times[i])
        a = 1.0 + brightness_amp * math.sin(
            2.0 * math.pi * t / brightness_period)
        gains[f] = a
        nav = NavState(p=truth.positions[i], rot=Rot3(truth.quats_wb[i]),
                       v=np.zeros(3), ba=np.zeros(3), bg=np.zeros(3), t=t)
        pose_cw = cam.camera_pose_cw(nav)
        out = render(scene, pose_cw, intr, brightness=(a, 0.0),
                     options=options)
        images.append(np.clip(out.color, 0.0, 1.0))

        p_c = pose_cw.transform(points)
        z = p_c[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = intr.fx * p_c[:, 0] / z + intr.cx
            v = intr.fy * p_c[:, 1] / z + intr.cy
        vis = ((z > track_min_depth)
               & (u >= margin_px) & (u <= intr.width - 1 - margin_px)
               & (v >= margin_px) & (v <= intr.height - 1 - margin_px))
        m = int(vis.sum())
        noise = rng.normal(scale=track_sigma_px, size=(m, 2)) \
            if track_sigma_px > 0.0 else np.zeros((m, 2))
        rows = np.column_stack([ids[vis].astype(float),
                                u[vis] + noise[:, 0], v[vis] + noise[:, 1]])
        tracks.append(rows)
    return FrameSim(times=times, images=images, brightness=gains,
                    track_points=points, track_ids=ids, tracks=tracks)


# ---------------------------------------------------------------------------
# trajectory error metric

@dataclass
class ApeResult:
    translation_rmse: float
    rotation_rmse_deg: float
    times: np.ndarray
    errors_enu: np.ndarray        # (n, 3) estimate - truth
    rotation_errors_deg: np.ndarray

    @property
    def max_translation_error(self) -> float:
        return float(np.max(np.linalg.norm(self.errors_enu, axis=1)))


def evaluate_ape(est_times, est_poses: Sequence[Pose], truth_times,
                 truth_poses: Sequence[Pose],
                 max_dt: float = 0.010) -> ApeResult:
    """Absolute pose error without alignment (shared anchored ENU frame).

    Pairs each estimate with the nearest truth timestamp within max_dt;
    raises NoOverlap when nothing associates.  Translation RMSE is over 3D
    error norms, rotation RMSE over geodesic angles.
    """
    est_times = np.asarray(est_times, dtype=float).reshape(-1)
    truth_times = np.asarray(truth_times, dtype=float).reshape(-1)
    if est_times.size == 0 or truth_times.size == 0:
        raise NoOverlap("empty trajectory")
    j = np.clip(np.searchsorted(truth_times, est_times), 0,
                truth_times.size - 1)
    j_lo = np.clip(j - 1, 0, truth_times.size - 1)
    pick = np.where(np.abs(truth_times[j_lo] - est_times)
                    <= np.abs(truth_times[j] - est_times), j_lo, j)
    ok = np.abs(truth_times[pick] - est_times) <= max_dt
    if not np.any(ok):
        raise NoOverlap(f"no timestamp pairs within {max_dt * 1e3:.0f} ms")

    errors = []
    rot_err = []
    kept_times = []
    for i in np.where(ok)[0]:
        a = est_poses[i]
        b = truth_poses[pick[i]]
        errors.append(a.translation - b.translation)
        ang = np.linalg.norm((b.rotation.inverse() * a.rotation).log())
        rot_err.append(math.degrees(ang))
        kept_times.append(est_times[i])
    errors = np.array(errors)
    rot_err = np.array(rot_err)
    return ApeResult(
        translation_rmse=float(np.sqrt(np.mean(np.sum(errors ** 2, axis=1)))),
        rotation_rmse_deg=float(np.sqrt(np.mean(rot_err ** 2))),
        times=np.array(kept_times), errors_enu=errors,
        rotation_errors_deg=rot_err)


# ---------------------------------------------------------------------------
# dataset files

def _fmt(x: float) -> str:
    return f"{x:.12g}"


def write_imu_csv(path, times, gyro, accel) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "gx", "gy", "gz", "ax", "ay", "az"])
        for i in range(len(times)):
            w.writerow([_fmt(times[i])] + [_fmt(v) for v in gyro[i]]
                       + [_fmt(v) for v in accel[i]])


def read_imu_csv(path):
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if rows.size == 0:
        raise DataError(f"{path}: empty IMU stream")
    return rows[:, 0], rows[:, 1:4], rows[:, 4:7]


def write_gnss_epoch_csv(path, epoch: GnssEpoch) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# t {_fmt(epoch.t)}\n")
        b = epoch.base_ecef
        fh.write(f"# base {_fmt(b[0])} {_fmt(b[1])} {_fmt(b[2])}\n")
        w = csv.writer(fh)
        w.writerow(["sat", "x", "y", "z", "dd_pseudorange", "sd_carrier",
                    "doppler", "elevation", "snr"])
        for i, s in enumerate(epoch.sat_ids):
            w.writerow([s] + [_fmt(v) for v in epoch.sat_pos[i]]
                       + [_fmt(epoch.dd_pseudorange[i]),
                          _fmt(epoch.sd_carrier[i]), _fmt(epoch.doppler[i]),
                          _fmt(epoch.elevation[i]), _fmt(epoch.snr[i])])


def read_gnss_epoch_csv(path) -> GnssEpoch:
    t = None
    base = None
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if parts[0] == "t":
                    t = float(parts[1])
                elif parts[0] == "base":
                    base = np.array([float(x) for x in parts[1:4]])
                continue
            rows.append(line.split(","))
    if t is None or base is None:
        raise DataError(f"{path}: missing '# t' or '# base' header")
    body = [r for r in rows if r[0] != "sat"]
    ids = [r[0] for r in body]
    arr = np.array([[float(x) for x in r[1:]] for r in body]) \
        if body else np.zeros((0, 8))
    return GnssEpoch(t=t, base_ecef=base, sat_ids=ids,
                     sat_pos=arr[:, 0:3], dd_pseudorange=arr[:, 3],
                     sd_carrier=arr[:, 4], doppler=arr[:, 5],
                     elevation=arr[:, 6], snr=arr[:, 7])


def read_tum(path):
    """TUM trajectory file to (times, [Pose])."""
    times = []
    poses = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if len(parts) != 8:
                continue
            vals = [float(x) for x in parts]
            times.append(vals[0])
            quat = np.array([vals[7], vals[4], vals[5], vals[6]])  # wxyz
            poses.append(Pose(Rot3(quat), np.array(vals[1:4])))
    if not times:
        raise DataError(f"{path}: no trajectory lines")
    return np.array(times), poses


@dataclass
class Dataset:
    root: Path
    imu_times: np.ndarray
    imu_gyro: np.ndarray
    imu_accel: np.ndarray
    epochs: List[GnssEpoch]
    frame_times: np.ndarray
    frame_paths: List[Path]
    tracks: Dict[float, np.ndarray]   # frame time -> (m, 3) id, u, v
    truth_times: np.ndarray
    truth_poses: List[Pose]
    scene_path: Path
    config_text: str


def write_dataset(out_dir, truth: TruthTrajectory, imu, gnss: GnssSim,
                  frames: FrameSim, scene: GaussianMap,
                  config_text: str = "") -> Path:
    """Write the on-disk dataset layout; returns the root directory."""
    root = Path(out_dir)
    (root / "gnss").mkdir(parents=True, exist_ok=True)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    times, gyro, accel = imu
    write_imu_csv(root / "imu.csv", times, gyro, accel)
    for k, epoch in enumerate(gnss.epochs):
        write_gnss_epoch_csv(root / "gnss" / f"epoch_{k:04d}.csv", epoch)
    with open(root / "frames.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "filename"])
        for k, t in enumerate(frames.times):
            name = f"frames/{k:06d}.png"
            save_image(root / name, frames.images[k])
            w.writerow([_fmt(t), name])
    with open(root / "tracks.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "feature_id", "u", "v"])
        for k, t in enumerate(frames.times):
            for row in frames.tracks[k]:
                w.writerow([_fmt(t), int(row[0]), _fmt(row[1]),
                            _fmt(row[2])])
    with open(root / "truth.tum", "w") as fh:
        for i in range(len(truth)):
            p = truth.positions[i]
            q = truth.quats_wb[i]
            fh.write(f"{truth.times[i]:.9f} {p[0]:.9f} {p[1]:.9f} "
                     f"{p[2]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f} "
                     f"{q[0]:.9f}\n")
    save_map(scene, root / "scene.gsmap")
    (root / "scenario.cfg").write_text(config_text)
    return root


def load_dataset(root) -> Dataset:
    root = Path(root)
    if not (root / "imu.csv").exists():
        raise DataError(f"{root}: not a dataset (missing imu.csv)")
    t_imu, gyro, accel = read_imu_csv(root / "imu.csv")
    epochs = [read_gnss_epoch_csv(p)
              for p in sorted((root / "gnss").glob("epoch_*.csv"))]
    frame_times = []
    frame_paths = []
    with open(root / "frames.csv") as fh:
        for row in csv.reader(fh):
            if not row or row[0] == "t":
                continue
            frame_times.append(float(row[0]))
            frame_paths.append(root / row[1])
    tracks: Dict[float, list] = {}
    tracks_file = root / "tracks.csv"
    if tracks_file.exists():
        with open(tracks_file) as fh:
            for row in csv.reader(fh):
                if not row or row[0] == "t":
                    continue
                tracks.setdefault(float(row[0]), []).append(
                    [float(row[1]), float(row[2]), float(row[3])])
    truth_times, truth_poses = read_tum(root / "truth.tum")
    cfg = root / "scenario.cfg"
    return Dataset(
        root=root, imu_times=t_imu, imu_gyro=gyro, imu_accel=accel,
        epochs=epochs, frame_times=np.array(frame_times),
        frame_paths=frame_paths,
        tracks={t: np.array(rows) for t, rows in tracks.items()},
        truth_times=truth_times, truth_poses=truth_poses,
        scene_path=root / "scene.gsmap",
        config_text=cfg.read_text() if cfg.exists() else "")
