"""Sliding-window factor-graph estimator over GNSS, inertial, visual, and
splat-photometric measurements.

States live in a Values container keyed by tuples: ("nav", k) -> NavState
with the 15-dim tangent [dp, dtheta, dv, dba, dbg], ("amb", sat) -> float
ambiguity in cycles, ("clk", constellation) -> float clock drift in Hz,
("lm", id) -> Vec3 landmark in anchored ENU.  Rotations retract on the right
(R <- R Exp(dtheta)); everything else is additive.

The solver is dense Levenberg-Marquardt with Marquardt diagonal scaling.
Accepted steps never increase the robustified cost; a trial state that puts
a landmark behind a camera is treated as infinite cost and rejected.
Marginalization folds the eliminated states' gathered, linearized factors
into a linear pseudo-measurement prior by Schur complement.
"""

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .camera import CameraIntrinsics
from .earth import EnuAnchor, L1_WAVELENGTH
from .errors import (BehindCamera, DegenerateView, ExcessiveMotion,
                     InsufficientData)
from .gaussian_map import DepthInit, GaussianMap, seed_from_frame
from .geometry import Pose, Rot3, skew, so3_right_jacobian_inv
from .gnss import (GnssEpoch, constellation_of, gnss_dd_residuals,
                   predicted_doppler, receiver_position_ecef, sd_pseudorange,
                   snap_position)
from .imu import GRAVITY_ENU, PreintegratedImu, imu_factor_residual
from .rasterizer import (DEFAULT_OPTIONS, RenderOptions,
                         per_pixel_pose_jacobians, render)
from .states import CamState, GnssState, NavState

Key = Tuple[str, object]


# ---------------------------------------------------------------------------
# values and manifold helpers

def value_dim(val) -> int:
    if isinstance(val, NavState):
        return 15
    if isinstance(val, np.ndarray):
        return int(val.size)
    return 1


def retract_value(val, delta: np.ndarray):
    if isinstance(val, NavState):
        return val.retract(delta)
    if isinstance(val, np.ndarray):
        return val + delta
    return float(val) + float(delta[0])


def local_value(val, val0) -> np.ndarray:
    """Tangent coordinates of val around val0 (inverse of retract_value)."""
    if isinstance(val, NavState):
        return np.concatenate([
            val.p - val0.p,
            (val0.rot.inverse() * val.rot).log(),
            val.v - val0.v,
            val.ba - val0.ba,
            val.bg - val0.bg,
        ])
    if isinstance(val, np.ndarray):
        return np.asarray(val - val0, dtype=float).ravel()
    return np.array([float(val) - float(val0)])


def local_jacobian(val, val0) -> np.ndarray:
    """d local_value / d tangent-of-val, exact for the rotation block."""
    if isinstance(val, NavState):
        j = np.eye(15)
        theta = (val0.rot.inverse() * val.rot).log()
        j[3:6, 3:6] = so3_right_jacobian_inv(theta)
        return j
    return np.eye(value_dim(val))


def copy_value(val):
    if isinstance(val, NavState):
        return val.copy()
    if isinstance(val, np.ndarray):
        return val.copy()
    return float(val)


class Values:
    """Insertion-ordered key -> state container."""

    def __init__(self):
        self._data: Dict[Key, object] = {}

    def set(self, key: Key, val) -> None:
        self._data[key] = val

    def get(self, key: Key):
        return self._data[key]

    def __contains__(self, key: Key) -> bool:
        return key in self._data

    def __len__(self) -> int:
        return len(self._data)

    def keys(self) -> List[Key]:
        return list(self._data.keys())

    def copy(self) -> "Values":
        out = Values()
        for k, v in self._data.items():
            out._data[k] = copy_value(v)
        return out

    def retracted(self, delta: np.ndarray, order: Sequence[Key],
                  offsets: Dict[Key, int]) -> "Values":
        out = self.copy()
        for k in order:
            o = offsets[k]
            d = value_dim(self._data[k])
            out._data[k] = retract_value(self._data[k], delta[o:o + d])
        return out


# ---------------------------------------------------------------------------
# robust loss

def huber_weight(norm: float, delta: float) -> float:
    return 1.0 if norm <= delta else delta / norm


def huber_cost(norm: float, delta: float) -> float:
    if norm <= delta:
        return 0.5 * norm * norm
    return delta * (norm - 0.5 * delta)


def _sqrt_information(cov: np.ndarray) -> np.ndarray:
    """Lower-triangular whitener W with W cov W^T = I."""
    chol = np.linalg.cholesky(0.5 * (cov + cov.T))
    return np.linalg.inv(chol)


# ---------------------------------------------------------------------------
# factors

class Factor:
    keys: Tuple[Key, ...] = ()

    def linearize(self, values: Values):
        """Whitened, robust-weighted (residual, [jacobian per key])."""
        raise NotImplementedError

    def cost(self, values: Values) -> float:
        r, _ = self.linearize(values)
        return 0.5 * float(r @ r)


class PriorFactor(Factor):
    """Gaussian prior pinning one state to a mean value."""

    def __init__(self, key: Key, mean, sqrt_info: np.ndarray):
        self.keys = (key,)
        self.mean = copy_value(mean)
        self.sqrt_info = np.asarray(sqrt_info, dtype=float)

    def linearize(self, values: Values):
        val = values.get(self.keys[0])
        r = self.sqrt_info @ local_value(val, self.mean)
        j = self.sqrt_info @ local_jacobian(val, self.mean)
        return r, [j]


class MarginalPriorFactor(Factor):
    """Linear pseudo-measurement r = H_p * local(x, x0) - z_p.

    The Schur complement of marginalized states lands here; the information
    carried is H_p^T H_p at the stored linearization point.
    """

    def __init__(self, keys: Sequence[Key], x0: Dict[Key, object],
                 h_p: np.ndarray, z_p: np.ndarray):
        self.keys = tuple(keys)
        self.x0 = {k: copy_value(v) for k, v in x0.items()}
        self.h_p = np.asarray(h_p, dtype=float)
        self.z_p = np.asarray(z_p, dtype=float)
        self._dims = [value_dim(self.x0[k]) for k in self.keys]

    @property
    def information(self) -> np.ndarray:
        return self.h_p.T @ self.h_p

    @property
    def dim(self) -> int:
        return self.h_p.shape[0]

    def linearize(self, values: Values):
        if not self.keys:
            return np.zeros(0), []
        deltas = []
        jacs = []
        col = 0
        for k, d in zip(self.keys, self._dims):
            val = values.get(k)
            deltas.append(local_value(val, self.x0[k]))
            block = self.h_p[:, col:col + d] @ local_jacobian(val, self.x0[k])
            jacs.append(block)
            col += d
        r = self.h_p @ np.concatenate(deltas) - self.z_p
        return r, jacs


class ImuFactor(Factor):
    """Preintegrated inertial constraint between consecutive nav states."""

    def __init__(self, key_i: Key, key_j: Key, preint: PreintegratedImu,
                 gravity: np.ndarray = GRAVITY_ENU):
        self.keys = (key_i, key_j)
        self.preint = preint
        self.gravity = np.asarray(gravity, dtype=float)
        self.sqrt_info = _sqrt_information(preint.cov)

    def linearize(self, values: Values):
        si = values.get(self.keys[0])
        sj = values.get(self.keys[1])
        r, ji, jj = imu_factor_residual(si, sj, self.preint, self.gravity)
        w = self.sqrt_info
        return w @ r, [w @ ji, w @ jj]


class BiasWalkFactor(Factor):
    """Random-walk coupling of accelerometer/gyro biases across an interval."""

    def __init__(self, key_i: Key, key_j: Key, cov_bias: np.ndarray):
        self.keys = (key_i, key_j)
        self.sqrt_info = _sqrt_information(cov_bias)

    def linearize(self, values: Values):
        si = values.get(self.keys[0])
        sj = values.get(self.keys[1])
        r = np.concatenate([sj.ba - si.ba, sj.bg - si.bg])
        ji = np.zeros((6, 15))
        jj = np.zeros((6, 15))
        ji[0:3, 9:12] = -np.eye(3)
        ji[3:6, 12:15] = -np.eye(3)
        jj[0:3, 9:12] = np.eye(3)
        jj[3:6, 12:15] = np.eye(3)
        w = self.sqrt_info
        return w @ r, [w @ ji, w @ jj]


@dataclass(frozen=True)
class GnssSigmas:
    dd_pseudorange: float = 1.0   # m
    sd_carrier: float = 0.01      # m
    doppler: float = 0.5          # Hz


class GnssEpochFactor(Factor):
    """One epoch's DD pseudorange + SD carrier + Doppler rows.

    Keys: the nav state, one ambiguity per epoch satellite, one clock drift
    per constellation.  Huber (3 sigma, applied after whitening) on the DD
    pseudorange rows only.
    """

    def __init__(self, nav_key: Key, epoch: GnssEpoch, anchor: EnuAnchor,
                 lever_arm: np.ndarray, sigmas: GnssSigmas = GnssSigmas(),
                 huber_dd: float = 3.0):
        self.epoch = epoch
        self.anchor = anchor
        self.lever_arm = np.asarray(lever_arm, dtype=float)
        self.sigmas = sigmas
        self.huber_dd = huber_dd
        self.amb_keys = [("amb", s) for s in epoch.sat_ids]
        consts = sorted({constellation_of(s) for s in epoch.sat_ids})
        self.clk_keys = [("clk", c) for c in consts]
        self.keys = tuple([nav_key] + self.amb_keys + self.clk_keys)

    def _whitened(self, values: Values):
        nav = values.get(self.keys[0])
        gstate = GnssState(
            lever_arm=self.lever_arm,
            ambiguities={s: values.get(("amb", s)) for s in self.epoch.sat_ids},
            clock_drift={k[1]: values.get(k) for k in self.clk_keys})
        out = gnss_dd_residuals(nav, gstate, self.epoch, self.anchor)
        w = np.empty(out.r.shape[0])
        w[:out.n_dd] = 1.0 / self.sigmas.dd_pseudorange
        w[out.n_dd:out.n_dd + out.n_carrier] = 1.0 / self.sigmas.sd_carrier
        w[out.n_dd + out.n_carrier:] = 1.0 / self.sigmas.doppler
        return out, out.r * w, w

    def linearize(self, values: Values):
        out, r, w = self._whitened(values)
        scale = w.copy()
        for i in range(out.n_dd):
            scale[i] *= math.sqrt(huber_weight(abs(r[i]), self.huber_dd))
        r_rows = out.r * scale
        j_nav = out.j_nav * scale[:, None]
        jacs = [j_nav]
        for col in range(len(self.amb_keys)):
            jacs.append((out.j_amb[:, col] * scale)[:, None])
        for col in range(len(self.clk_keys)):
            jacs.append((out.j_drift[:, col] * scale)[:, None])
        return r_rows, jacs

    def cost(self, values: Values) -> float:
        out, r, _ = self._whitened(values)
        c = 0.0
        for i in range(out.n_dd):
            c += huber_cost(abs(r[i]), self.huber_dd)
        tail = r[out.n_dd:]
        return c + 0.5 * float(tail @ tail)


def reprojection_residual(nav: NavState, landmark: np.ndarray,
                          uv: np.ndarray, t_bc: np.ndarray, rot_bc: Rot3,
                          intr: CameraIntrinsics):
    """Pixel residual pi(p_C) - uv with Jacobians.

    Returns (r (2,), j_pose (2,6) on [dp, dtheta], j_landmark (2,3)).
    Raises BehindCamera when the landmark's camera depth is non-positive.
    """
    r_wb = nav.rot.matrix()
    r_cb = rot_bc.matrix().T
    t_cb = -r_cb @ np.asarray(t_bc, dtype=float)
    p_b = r_wb.T @ (np.asarray(landmark, dtype=float) - nav.p)
    p_c = r_cb @ p_b + t_cb
    x, y, z = p_c
    if z <= 0.0:
        raise BehindCamera(f"landmark depth {z:.3g} m behind the camera")
    r = np.array([intr.fx * x / z + intr.cx - uv[0],
                  intr.fy * y / z + intr.cy - uv[1]])
    dpi = np.array([[intr.fx / z, 0.0, -intr.fx * x / (z * z)],
                    [0.0, intr.fy / z, -intr.fy * y / (z * z)]])
    r_cw = r_cb @ r_wb.T
    j_pose = np.hstack([dpi @ (-r_cw), dpi @ (r_cb @ skew(p_b))])
    j_lm = dpi @ r_cw
    return r, j_pose, j_lm


class ReprojectionFactor(Factor):
    """Huber-robust pinhole observation of one landmark from one nav state."""

    def __init__(self, nav_key: Key, lm_key: Key, uv: np.ndarray,
                 intr: CameraIntrinsics, t_bc: np.ndarray, rot_bc: Rot3,
                 sigma_px: float = 1.0, huber_px: float = 2.0):
        self.keys = (nav_key, lm_key)
        self.uv = np.asarray(uv, dtype=float)
        self.intr = intr
        self.t_bc = np.asarray(t_bc, dtype=float)
        self.rot_bc = rot_bc
        self.sigma_px = sigma_px
        self.huber = huber_px / sigma_px  # threshold in whitened units

    def _whitened(self, values: Values):
        nav = values.get(self.keys[0])
        lm = values.get(self.keys[1])
        r, j_pose, j_lm = reprojection_residual(nav, lm, self.uv, self.t_bc,
                                                self.rot_bc, self.intr)
        return r / self.sigma_px, j_pose / self.sigma_px, j_lm / self.sigma_px

    def linearize(self, values: Values):
        r, j_pose, j_lm = self._whitened(values)
        s = math.sqrt(huber_weight(float(np.linalg.norm(r)), self.huber))
        j_nav = np.zeros((2, 15))
        j_nav[:, 0:6] = j_pose
        return r * s, [j_nav * s, j_lm * s]

    def cost(self, values: Values) -> float:
        r, _, _ = self._whitened(values)
        return huber_cost(float(np.linalg.norm(r)), self.huber)


def _body_twist_chain(nav: NavState, t_bc: np.ndarray, rot_bc: Rot3) -> np.ndarray:
    """M with tau_cam = M [dp; dtheta]: the camera-frame left twist on T_CW
    induced by the body-state tangent, through the fixed extrinsic."""
    r_wb = nav.rot.matrix()
    r_cb = rot_bc.matrix().T
    r_cw = r_cb @ r_wb.T
    m = np.zeros((6, 6))
    m[0:3, 0:3] = -r_cw
    m[0:3, 3:6] = r_cb @ skew(t_bc)
    m[3:6, 3:6] = -r_cb
    return m


def _budget_subsample(mask: np.ndarray, budget: int):
    rows, cols = np.nonzero(mask)
    n = rows.size
    if n > budget:
        pick = np.unique(np.round(np.linspace(0, n - 1, budget)).astype(np.int64))
        rows, cols = rows[pick], cols[pick]
    return cols, rows  # px, py


def gs_pose_factor(nav: NavState, gmap: GaussianMap, target: np.ndarray,
                   mask: np.ndarray, intr: CameraIntrinsics,
                   t_bc: np.ndarray, rot_bc: Rot3,
                   brightness: Tuple[float, float], sigma2: float,
                   budget: int = 4096,
                   options: RenderOptions = DEFAULT_OPTIONS):
    """Stacked per-masked-pixel per-channel photometric rows at one state.

    r[pixel, channel] = T_acc * (a C + b - target) / sigma, flattened
    channel-minor; the Jacobian is 6 columns on the body tangent [dp, dtheta].
    Raises DegenerateView when the mask is empty.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise DegenerateView("empty mask leaves no photometric residuals")
    px, py = _budget_subsample(mask, budget)
    pose_cw = (nav.pose_wb() * Pose(rot_bc, t_bc)).inverse()
    c_raw, t_fin, j_c, j_t = per_pixel_pose_jacobians(
        gmap, pose_cw, intr, px, py, options)
    a, b = float(brightness[0]), float(brightness[1])
    sigma = math.sqrt(sigma2)
    t_acc = 1.0 - t_fin
    diff = a * c_raw + b - np.asarray(target, dtype=float)[py, px, :]
    r = (t_acc[:, None] * diff / sigma).ravel()
    # dr = [T_acc a dC - diff dT_fin] / sigma, row per (pixel, channel)
    j_tau = (t_acc[:, None, None] * a * j_c
             - diff[:, :, None] * j_t[:, None, :]) / sigma
    j_body = j_tau.reshape(-1, 6) @ _body_twist_chain(nav, t_bc, rot_bc)
    return r, j_body


class GsPoseFactor(Factor):
    """Photometric alignment of one frame against a map snapshot.

    The map, brightness pair, and variance are frozen at construction; only
    the nav state is estimated (map optimization runs outside the graph).
    """

    def __init__(self, nav_key: Key, gmap: GaussianMap, target: np.ndarray,
                 mask: np.ndarray, intr: CameraIntrinsics, t_bc: np.ndarray,
                 rot_bc: Rot3, brightness: Tuple[float, float], sigma2: float,
                 budget: int = 4096, options: RenderOptions = DEFAULT_OPTIONS):
        if sigma2 <= 0.0:
            raise ValueError("sigma2 must be positive")
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise DegenerateView("empty mask leaves no photometric residuals")
        self.keys = (nav_key,)
        self.gmap = gmap
        self.target = np.asarray(target, dtype=float)
        self.intr = intr
        self.t_bc = np.asarray(t_bc, dtype=float)
        self.rot_bc = rot_bc
        self.brightness = (float(brightness[0]), float(brightness[1]))
        self.sigma2 = float(sigma2)
        self.options = options
        self.px, self.py = _budget_subsample(mask, budget)

    def _pose_cw(self, nav: NavState) -> Pose:
        return (nav.pose_wb() * Pose(self.rot_bc, self.t_bc)).inverse()

    def linearize(self, values: Values):
        nav = values.get(self.keys[0])
        c_raw, t_fin, j_c, j_t = per_pixel_pose_jacobians(
            self.gmap, self._pose_cw(nav), self.intr, self.px, self.py,
            self.options)
        a, b = self.brightness
        sigma = math.sqrt(self.sigma2)
        t_acc = 1.0 - t_fin
        diff = a * c_raw + b - self.target[self.py, self.px, :]
        r = (t_acc[:, None] * diff / sigma).ravel()
        j_tau = (t_acc[:, None, None] * a * j_c
                 - diff[:, :, None] * j_t[:, None, :]) / sigma
        j_nav = np.zeros((r.shape[0], 15))
        j_nav[:, 0:6] = j_tau.reshape(-1, 6) @ _body_twist_chain(
            nav, self.t_bc, self.rot_bc)
        return r, [j_nav]

    def cost(self, values: Values) -> float:
        nav = values.get(self.keys[0])
        rend = render(self.gmap, self._pose_cw(nav), self.intr,
                      brightness=self.brightness, options=self.options)
        t_acc = rend.t_acc[self.py, self.px]
        diff = rend.color[self.py, self.px, :] - self.target[self.py, self.px, :]
        r = (t_acc[:, None] * diff / math.sqrt(self.sigma2)).ravel()
        return 0.5 * float(r @ r)


# ---------------------------------------------------------------------------
# graph and solver

class FactorGraph:
    def __init__(self):
        self.values = Values()
        self.factors: List[Factor] = []

    def add_value(self, key: Key, val) -> None:
        self.values.set(key, val)

    def add_factor(self, factor: Factor) -> None:
        for k in factor.keys:
            if k not in self.values:
                raise KeyError(f"factor references missing state {k}")
        self.factors.append(factor)

    def cost(self, values: Optional[Values] = None) -> float:
        vals = self.values if values is None else values
        return sum(f.cost(vals) for f in self.factors)

    def ordering(self) -> Tuple[List[Key], Dict[Key, int], int]:
        order = self.values.keys()
        offsets = {}
        total = 0
        for k in order:
            offsets[k] = total
            total += value_dim(self.values.get(k))
        return order, offsets, total

    def linearize_system(self, values: Values):
        """Dense normal equations: H = sum J^T J, g = -sum J^T r."""
        order, offsets, total = self.ordering()
        h = np.zeros((total, total))
        g = np.zeros(total)
        for f in self.factors:
            r, jacs = f.linearize(values)
            if r.shape[0] == 0:
                continue
            for ka, ja in zip(f.keys, jacs):
                oa = offsets[ka]
                da = ja.shape[1]
                g[oa:oa + da] -= ja.T @ r
                for kb, jb in zip(f.keys, jacs):
                    ob = offsets[kb]
                    db = jb.shape[1]
                    h[oa:oa + da, ob:ob + db] += ja.T @ jb
        return h, g, order, offsets


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 50
    gradient_tol: float = 1e-8
    rel_cost_tol: float = 1e-10
    lambda_init: float = 0.0
    lambda_scale: float = 10.0
    lambda_max: float = 1e8


@dataclass
class SolveIteration:
    iteration: int
    cost: float
    damping: float
    step_norm: float
    accepted: bool


@dataclass
class SolveReport:
    initial_cost: float
    final_cost: float
    termination: str
    iterations: List[SolveIteration] = field(default_factory=list)

    @property
    def rank_deficient(self) -> bool:
        return self.termination == "rank_deficient"

    @property
    def accepted_steps(self) -> int:
        return sum(1 for it in self.iterations if it.accepted)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "cost", "damping", "step_norm", "accepted"])
            for it in self.iterations:
                w.writerow([it.iteration, f"{it.cost:.12g}",
                            f"{it.damping:.6g}", f"{it.step_norm:.9g}",
                            int(it.accepted)])


def _try_cost(graph: FactorGraph, values: Values) -> float:
    try:
        return graph.cost(values)
    except BehindCamera:
        return float("inf")


def solve_window(graph: FactorGraph,
                 config: SolverConfig = SolverConfig()) -> SolveReport:
    """Levenberg-Marquardt over the graph's values, updated in place.

    Terminates on max-norm gradient < gradient_tol, relative cost change <
    rel_cost_tol, the iteration cap, or damping growth past lambda_max (the
    rank-deficient outcome, reported rather than raised).
    """
    values = graph.values
    cost = graph.cost(values)
    report = SolveReport(initial_cost=cost, final_cost=cost,
                         termination="max_iterations")
    lam = config.lambda_init
    for it in range(1, config.max_iterations + 1):
        h, g, order, offsets = graph.linearize_system(values)
        if np.max(np.abs(g), initial=0.0) < config.gradient_tol:
            report.termination = "gradient"
            break
        d = np.maximum(np.diag(h), 1e-12)
        accepted = False
        while True:
            a = h + lam * np.diag(d)
            try:
                np.linalg.cholesky(a)
                delta = np.linalg.solve(a, g)
            except np.linalg.LinAlgError:
                delta = None
            if delta is not None:
                trial = values.retracted(delta, order, offsets)
                trial_cost = _try_cost(graph, trial)
                step_norm = float(np.linalg.norm(delta))
                if trial_cost <= cost:
                    report.iterations.append(SolveIteration(
                        it, trial_cost, lam, step_norm, True))
                    prev = cost
                    cost = trial_cost
                    values = trial
                    lam = 0.0 if lam < 1e-10 else lam / config.lambda_scale
                    accepted = True
                    converged = (prev - cost) <= config.rel_cost_tol * max(prev, 1e-300)
                    break
                report.iterations.append(SolveIteration(
                    it, trial_cost, lam, step_norm, False))
            lam = 1e-4 if lam == 0.0 else lam * config.lambda_scale
            if lam > config.lambda_max:
                break
        if not accepted:
            report.termination = "rank_deficient"
            break
        if converged:
            report.termination = "cost"
            break
    graph.values._data.update(values._data)
    report.final_cost = cost
    return report


# ---------------------------------------------------------------------------
# marginalization

def marginalize(factors: Sequence[Factor], values: Values,
                drop_keys: Sequence[Key]):
    """Schur-complement the factors touching drop_keys onto their separator.

    Returns (MarginalPriorFactor, untouched factors).  The prior is empty
    when nothing references the dropped states.
    """
    drop = [k for k in drop_keys]
    drop_set = set(drop)
    touched = [f for f in factors if any(k in drop_set for k in f.keys)]
    untouched = [f for f in factors if not any(k in drop_set for k in f.keys)]
    if not touched:
        return MarginalPriorFactor((), {}, np.zeros((0, 0)), np.zeros(0)), untouched

    sep: List[Key] = []
    for f in touched:
        for k in f.keys:
            if k not in drop_set and k not in sep:
                sep.append(k)
    order = [k for k in drop if any(k in f.keys for f in touched)] + sep
    offsets = {}
    total = 0
    for k in order:
        offsets[k] = total
        total += value_dim(values.get(k))
    m_dim = total - sum(value_dim(values.get(k)) for k in sep)

    h = np.zeros((total, total))
    b = np.zeros(total)
    for f in touched:
        r, jacs = f.linearize(values)
        for ka, ja in zip(f.keys, jacs):
            oa = offsets[ka]
            da = ja.shape[1]
            b[oa:oa + da] += ja.T @ r
            for kb, jb in zip(f.keys, jacs):
                ob = offsets[kb]
                h[oa:oa + da, ob:ob + jb.shape[1]] += ja.T @ jb

    h_mm = h[:m_dim, :m_dim]
    h_ms = h[:m_dim, m_dim:]
    h_ss = h[m_dim:, m_dim:]
    b_m = b[:m_dim]
    b_s = b[m_dim:]

    w, v = np.linalg.eigh(0.5 * (h_mm + h_mm.T))
    w_max = max(float(w[-1]), 0.0)
    inv_w = np.where(w > 1e-12 * max(w_max, 1.0), 1.0 / w, 0.0)
    h_mm_inv = (v * inv_w) @ v.T
    k_mat = h_ms.T @ h_mm_inv
    h_tilde = h_ss - k_mat @ h_ms
    b_tilde = b_s - k_mat @ b_m

    if not sep:
        return MarginalPriorFactor((), {}, np.zeros((0, 0)), np.zeros(0)), untouched

    w2, v2 = np.linalg.eigh(0.5 * (h_tilde + h_tilde.T))
    scale = max(float(np.abs(w2).max()), 1.0)
    keep = w2 > 1e-12 * scale
    sqrt_w = np.sqrt(np.clip(w2[keep], 0.0, None))
    h_p = sqrt_w[:, None] * v2[:, keep].T
    z_p = -(v2[:, keep].T @ b_tilde) / sqrt_w
    x0 = {k: values.get(k) for k in sep}
    return MarginalPriorFactor(tuple(sep), x0, h_p, z_p), untouched


# ---------------------------------------------------------------------------
# initialization

@dataclass(frozen=True)
class InitConfig:
    low_motion_gyro: float = 0.05      # rad/s gate on |omega|
    low_motion_min_span: float = 0.3   # s of contiguous low motion required
    min_heading_motion: float = 0.5    # m of horizontal travel to fix yaw
    seed_stride: int = 4


@dataclass
class InitResult:
    anchor: EnuAnchor
    nav_states: List[NavState]
    gnss_state: GnssState
    gmap: GaussianMap
    gyro_bias: np.ndarray
    low_motion_span: float


def _longest_low_motion(times, gyro, gate):
    norms = np.linalg.norm(gyro, axis=1)
    best = (0.0, 0, 0)
    start = None
    for i in range(len(norms) + 1):
        if i < len(norms) and norms[i] < gate:
            if start is None:
                start = i
        elif start is not None:
            span = times[i - 1] - times[start]
            if span > best[0]:
                best = (span, start, i)
            start = None
    return best


def _tilt_from_gravity(accel_mean: np.ndarray) -> Rot3:
    f = accel_mean / np.linalg.norm(accel_mean)
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(f, z)
    s = np.linalg.norm(axis)
    c = float(f @ z)
    if s < 1e-12:
        if c > 0.0:
            return Rot3.identity()
        return Rot3.exp(np.array([math.pi, 0.0, 0.0]))
    return Rot3.exp(axis / s * math.atan2(s, c))


def initialize_system(epochs: Sequence[GnssEpoch], imu_times: np.ndarray,
                      imu_gyro: np.ndarray, imu_accel: np.ndarray,
                      frames: Sequence[np.ndarray], frame_times: Sequence[float],
                      intr: CameraIntrinsics, cam: CamState,
                      depth_model: DepthInit,
                      lever_arm: Optional[np.ndarray] = None,
                      config: InitConfig = InitConfig()) -> InitResult:
    """Bootstrap the anchor, attitude, biases, per-epoch states, and map.

    The anchor sits at the first position fix.  Yaw comes from the first
    horizontal displacement beyond min_heading_motion (zero if the buffer is
    stationary throughout); roll/pitch from the low-motion mean specific
    force; the gyro bias from the same segment.
    """
    if len(epochs) < 2:
        raise InsufficientData(f"need >= 2 GNSS epochs, have {len(epochs)}")
    if len(frames) < 1:
        raise InsufficientData("need at least one camera frame")
    imu_times = np.asarray(imu_times, dtype=float)
    if (imu_times.size < 2 or imu_times[0] > epochs[0].t + 1e-6
            or imu_times[-1] < epochs[-1].t - 1e-6):
        raise InsufficientData("IMU samples do not span the GNSS epochs")
    imu_gyro = np.asarray(imu_gyro, dtype=float)
    imu_accel = np.asarray(imu_accel, dtype=float)
    lever = np.zeros(3) if lever_arm is None else np.asarray(lever_arm, float)

    span, lo, hi = _longest_low_motion(imu_times, imu_gyro,
                                       config.low_motion_gyro)
    if span < config.low_motion_min_span:
        raise ExcessiveMotion(
            f"longest low-motion segment {span:.3g} s < "
            f"{config.low_motion_min_span:.3g} s")
    gyro_bias = imu_gyro[lo:hi].mean(axis=0)
    accel_mean = imu_accel[lo:hi].mean(axis=0)

    anchor0 = EnuAnchor.from_ecef(epochs[0].base_ecef)
    p0 = snap_position(epochs[0], anchor0)
    anchor = EnuAnchor.from_ecef(anchor0.from_enu(p0))
    times = np.array([e.t for e in epochs])
    antenna = np.zeros((len(epochs), 3))
    guess = np.zeros(3)
    for i, e in enumerate(epochs):
        antenna[i] = snap_position(e, anchor, p0_enu=guess)
        guess = antenna[i]

    vel = np.gradient(antenna, times, axis=0)

    r_tilt = _tilt_from_gravity(accel_mean)
    theta_z = 0.0
    for i in range(1, len(epochs)):
        d = antenna[i] - antenna[0]
        if np.hypot(d[0], d[1]) > config.min_heading_motion:
            theta_z = math.atan2(d[1], d[0])
            break
    r_wb = Rot3.exp(np.array([0.0, 0.0, theta_z])) * r_tilt

    nav_states = []
    for i, e in enumerate(epochs):
        p_body = antenna[i] - r_wb.rotate(lever)
        nav_states.append(NavState(p=p_body, rot=r_wb, v=vel[i].copy(),
                                   ba=np.zeros(3), bg=gyro_bias.copy(), t=e.t))

    first = epochs[0]
    rcv0 = receiver_position_ecef(anchor, nav_states[0].p, r_wb.matrix(), lever)
    ambiguities = {}
    for i, s in enumerate(first.sat_ids):
        sd = sd_pseudorange(rcv0, first.base_ecef, first.sat_pos[i])
        ambiguities[s] = float((first.sd_carrier[i] - sd) / L1_WAVELENGTH)
    v_ecef = anchor.rotate_from_enu(nav_states[0].v)
    drift_sum: Dict[str, list] = {}
    for i, s in enumerate(first.sat_ids):
        pred = predicted_doppler(rcv0, v_ecef, first.sat_pos[i], 0.0)
        drift_sum.setdefault(constellation_of(s), []).append(
            float(first.doppler[i] - pred))
    clock_drift = {c: float(np.mean(v)) for c, v in drift_sum.items()}
    gnss_state = GnssState(lever_arm=lever, ambiguities=ambiguities,
                           clock_drift=clock_drift)

    gmap = GaussianMap()
    pose_cw = cam.camera_pose_cw(nav_states[0])
    seed_from_frame(gmap, frames[0], pose_cw, intr, depth_model,
                    birth_keyframe=0, stride=config.seed_stride)
    return InitResult(anchor=anchor, nav_states=nav_states,
                      gnss_state=gnss_state, gmap=gmap, gyro_bias=gyro_bias,
                      low_motion_span=span)


# ---------------------------------------------------------------------------
# trajectory output

def write_tum(path, times: Sequence[float], poses_wb: Sequence[Pose]) -> None:
    """One `timestamp tx ty tz qx qy qz qw` line per pose (ENU, seconds)."""
    with open(path, "w") as fh:
        for t, pose in zip(times, poses_wb):
            p = pose.translation
            q = pose.rotation.quat
            fh.write(f"{t:.9f} {p[0]:.9f} {p[1]:.9f} {p[2]:.9f} "
                     f"{q[1]:.9f} {q[2]:.9f} {q[3]:.9f} {q[0]:.9f}\n")
