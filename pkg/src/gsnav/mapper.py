"""Keyframed map optimization and photometric pose tracking.

The mapper owns keyframe selection, windowed first-order optimization of the
Gaussian attributes, the photometric-variance weight used by the fusion
factors, and the extreme-motion detector that arms pruning.  The tracker
refines a predicted camera pose (plus an affine brightness pair) against the
map by steepest descent with backtracking line search on the masked L1 loss.

All poses here are camera-from-world transforms.
"""

import csv
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .camera import CameraIntrinsics
from .errors import DegenerateView, InsufficientData
from .gaussian_map import (
    GaussianMap,
    MotionThresholds,
    adaptive_density_control,
    isotropic_loss_grad,
    median_scene_depth,
)
from .geometry import Pose, exp_se3
from .rasterizer import (
    DEFAULT_OPTIONS,
    RenderOptions,
    backward_attributes,
    backward_pose,
    masked_photometric_loss,
    visible_ids,
)


@dataclass
class Keyframe:
    """One registered mapping view with its training image and edge mask."""

    id: int
    pose: Pose
    image: np.ndarray
    mask: np.ndarray
    inserted_ids: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    mapping_loss: float = 0.0
    brightness: Tuple[float, float] = (1.0, 0.0)


@dataclass
class KeyframeWindow:
    keyframes: List[Keyframe] = field(default_factory=list)
    max_size: int = 8
    lambda_isotropic: float = 10.0

    def latest(self) -> Optional[Keyframe]:
        return self.keyframes[-1] if self.keyframes else None

    def ids(self) -> List[int]:
        return [kf.id for kf in self.keyframes]


@dataclass
class TrackingResult:
    pose: Pose
    brightness: Tuple[float, float]
    final_loss: float
    iterations: int
    sigma2_3dgs: float


@dataclass(frozen=True)
class TrackerConfig:
    """Pose-refinement settings.

    The tracker is a limited-memory quasi-Newton descent built purely from
    photometric gradients: curvature pairs are collected across iterations
    (identity transport between the per-iteration pose charts), and a
    normalized gradient step of length fallback_step seeds the search while
    the memory is empty or fails to yield a descent direction.  Plain
    gradient steps zigzag for hundreds of iterations in the shallow valley
    that couples lateral translation with rotation, so the curvature memory
    is what makes the 50-iteration budget sufficient.
    """

    max_iterations: int = 50
    grad_tol: float = 1e-6
    loss_tol: float = 1e-8
    min_valid_pixels: int = 50
    t_acc_threshold: float = 0.1
    memory: int = 8
    fallback_step: float = 0.01
    armijo_c: float = 1e-4
    backtrack_factor: float = 0.5
    max_backtracks: int = 25
    options: RenderOptions = DEFAULT_OPTIONS


@dataclass(frozen=True)
class MapperConfig:
    """First-order map optimizer rates; the mean rate scales with extent."""

    lr_means: float = 1.6e-4
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    adc_interval: int = 10           # rounds between density-control passes, 0 off
    adc_grad_threshold: float = 2e-4
    adc_scale_fraction: float = 0.01  # of scene extent
    adc_opacity_floor: float = 0.05
    options: RenderOptions = DEFAULT_OPTIONS


def mean_isotropic_loss(gmap: GaussianMap) -> float:
    """Per-primitive average of the scale-deviation L1; the E_isotropic that
    enters the factor variance and the mapping objective."""
    n = len(gmap)
    if n == 0:
        return 0.0
    loss, _ = isotropic_loss_grad(gmap)
    return loss / n


def gs_factor_variance(window: KeyframeWindow, gmap: GaussianMap) -> float:
    """Photometric variance of the splatting factor: the sum of the window's
    mapping losses plus the weighted isotropic term, floored at 1e-6."""
    total = sum(kf.mapping_loss for kf in window.keyframes)
    total += window.lambda_isotropic * mean_isotropic_loss(gmap)
    return max(total, 1e-6)


def _camera_center(pose_cw: Pose) -> np.ndarray:
    return pose_cw.inverse().translation


def _covisibility_iou(gmap, pose_a, pose_b, intr, options) -> float:
    va = visible_ids(gmap, pose_a, intr, options)
    vb = visible_ids(gmap, pose_b, intr, options)
    union = np.union1d(va, vb).size
    if union == 0:
        return 1.0
    return np.intersect1d(va, vb).size / union


def should_register_keyframe(current_pose: Pose, last_kf: Optional[Keyframe],
                             gmap: GaussianMap, intr: CameraIntrinsics,
                             theta_cov: float = 0.9,
                             options: RenderOptions = DEFAULT_OPTIONS) -> bool:
    """True when covisibility with the last keyframe dropped below theta_cov
    or the camera moved farther than the median map depth."""
    if last_kf is None:
        return True
    iou = _covisibility_iou(gmap, current_pose, last_kf.pose, intr, options)
    if iou < theta_cov:
        return True
    translation = np.linalg.norm(
        _camera_center(current_pose) - _camera_center(last_kf.pose))
    return translation > median_scene_depth(gmap, current_pose)


def maintain_window(window: KeyframeWindow, new_kf: Keyframe,
                    gmap: GaussianMap, intr: CameraIntrinsics,
                    theta_evict: float = 0.3,
                    options: RenderOptions = DEFAULT_OPTIONS,
                    min_visibility: int = 3) -> List[int]:
    """Insert a keyframe, evict stale ones, clean up their young primitives.

    Eviction order: first every keyframe whose covisible fraction with the
    new latest drops below theta_evict, then oldest-first down to capacity.
    Returns evicted keyframe ids.  Re-inserting an already present id is a
    no-op.
    """
    from .gaussian_map import remove_keyframe_gaussians

    if any(kf.id == new_kf.id for kf in window.keyframes):
        return []
    if window.keyframes and new_kf.id <= window.keyframes[-1].id:
        raise ValueError(
            f"keyframe ids must increase: got {new_kf.id} after "
            f"{window.keyframes[-1].id}")
    window.keyframes.append(new_kf)

    v_latest = visible_ids(gmap, new_kf.pose, intr, options)
    evicted: List[Keyframe] = []
    survivors: List[Keyframe] = []
    for kf in window.keyframes[:-1]:
        v_kf = visible_ids(gmap, kf.pose, intr, options)
        denom = max(min(v_kf.size, v_latest.size), 1)
        overlap = np.intersect1d(v_kf, v_latest).size / denom
        (survivors if overlap >= theta_evict else evicted).append(kf)
    while len(survivors) + 1 > window.max_size:
        evicted.append(survivors.pop(0))
    window.keyframes = survivors + [new_kf]

    for kf in evicted:
        remove_keyframe_gaussians(gmap, kf.id, min_visibility)
    return [kf.id for kf in evicted]


def _scene_extent(gmap: GaussianMap) -> float:
    if len(gmap) == 0:
        return 1.0
    centroid = gmap.means.mean(axis=0)
    return float(max(np.linalg.norm(gmap.means - centroid, axis=1).max(), 1.0))


def _axis_angle_quats(w: np.ndarray) -> np.ndarray:
    """(n, 3) rotation vectors to wxyz unit quaternions, vectorized."""
    theta = np.linalg.norm(w, axis=1)
    half = 0.5 * theta
    k = np.full_like(theta, 0.5)
    big = theta > 1e-8
    k[big] = np.sin(half[big]) / theta[big]
    out = np.empty((w.shape[0], 4))
    out[:, 0] = np.cos(half)
    out[:, 1:] = w * k[:, None]
    return out


def _quat_mul_batch(q: np.ndarray, r: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    w2, x2, y2, z2 = r[:, 0], r[:, 1], r[:, 2], r[:, 3]
    return np.stack([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ], axis=1)


def optimize_map(window: KeyframeWindow, gmap: GaussianMap,
                 intr: CameraIntrinsics, iterations: int = 30,
                 config: MapperConfig = MapperConfig()) -> np.ndarray:
    """First-order refinement of all Gaussian attributes over the window.

    Each round walks the keyframes in order; per keyframe it evaluates the
    masked photometric loss, backpropagates, and immediately steps every
    attribute with its fixed rate (the isotropic pull rides on the scale
    step).  Density control runs every adc_interval rounds.  Returns the last
    recorded photometric loss per keyframe and stores it on the keyframes.
    """
    if not window.keyframes:
        raise ValueError("keyframe window is empty")
    losses = np.array([kf.mapping_loss for kf in window.keyframes])
    if len(gmap) == 0 or iterations <= 0:
        return losses
    for rnd in range(iterations):
        if config.adc_interval > 0 and rnd > 0 and rnd % config.adc_interval == 0:
            extent = _scene_extent(gmap)
            adaptive_density_control(
                gmap, config.adc_grad_threshold,
                config.adc_scale_fraction * extent,
                opacity_floor=config.adc_opacity_floor)
            if len(gmap) == 0:
                break
        extent = _scene_extent(gmap)
        n = len(gmap)
        for i, kf in enumerate(window.keyframes):
            loss, _ = masked_photometric_loss(
                gmap, kf.pose, intr, kf.brightness, kf.image, kf.mask,
                config.options)
            grads = backward_attributes(
                gmap, kf.pose, intr, kf.brightness, kf.image, kf.mask,
                config.options)
            _, iso_grad = isotropic_loss_grad(gmap)

            gmap.means -= config.lr_means * extent * grads.means
            np.clip(gmap.colors - config.lr_color * grads.colors, 0.0, 1.0,
                    out=gmap.colors)
            gmap.logit_opacities -= config.lr_opacity * grads.logit_opacities
            gmap.log_scales -= config.lr_scale * (
                grads.log_scales + window.lambda_isotropic * iso_grad / n)
            delta = _axis_angle_quats(-config.lr_rotation * grads.rotations)
            quats = _quat_mul_batch(gmap.quats, delta)
            gmap.quats[:] = quats / np.linalg.norm(quats, axis=1, keepdims=True)
            losses[i] = loss
    for kf, loss in zip(window.keyframes, losses):
        kf.mapping_loss = float(loss)
    return losses


def _quasi_newton_direction(g: np.ndarray, mem_s: List[np.ndarray],
                            mem_y: List[np.ndarray]) -> np.ndarray:
    """Two-loop recursion over the stored curvature pairs."""
    q = g.copy()
    rhos = [1.0 / float(s @ y) for s, y in zip(mem_s, mem_y)]
    alphas = []
    for s, y, rho in zip(reversed(mem_s), reversed(mem_y), reversed(rhos)):
        a = rho * float(s @ q)
        alphas.append(a)
        q -= a * y
    q *= float(mem_s[-1] @ mem_y[-1]) / float(mem_y[-1] @ mem_y[-1])
    for (s, y, rho), a in zip(zip(mem_s, mem_y, rhos), reversed(alphas)):
        q += (a - rho * float(y @ q)) * s
    return -q


def track_pose(image: np.ndarray, mask: np.ndarray, initial_pose: Pose,
               gmap: GaussianMap, intr: CameraIntrinsics,
               brightness: Tuple[float, float] = (1.0, 0.0),
               config: TrackerConfig = TrackerConfig(),
               window: Optional[KeyframeWindow] = None) -> TrackingResult:
    """Minimize the masked photometric loss over (pose twist, a, b).

    Gradient-only quasi-Newton descent with backtracking line search; the
    returned pose never scores worse than the initial one.  Stops on
    gradient norm, loss change, or the iteration cap.
    """
    image = np.asarray(image, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    loss, n_valid = masked_photometric_loss(
        gmap, initial_pose, intr, brightness, image, mask, config.options,
        config.t_acc_threshold)
    if np.count_nonzero(mask) == 0 or n_valid < config.min_valid_pixels:
        raise DegenerateView(
            f"only {n_valid} masked pixels exceed opacity "
            f"{config.t_acc_threshold} (need {config.min_valid_pixels})")

    pose = initial_pose
    a, b = float(brightness[0]), float(brightness[1])
    mem_s: List[np.ndarray] = []
    mem_y: List[np.ndarray] = []
    prev_g: Optional[np.ndarray] = None
    prev_s: Optional[np.ndarray] = None
    iterations = 0
    for it in range(1, config.max_iterations + 1):
        grad = backward_pose(gmap, pose, intr, (a, b), image, mask,
                             config.options)
        g = np.concatenate([grad.tau, [grad.da, grad.db]])
        g_norm = float(np.linalg.norm(g))
        if g_norm < config.grad_tol:
            break
        if prev_g is not None:
            y = g - prev_g
            if float(prev_s @ y) > 1e-12 * np.linalg.norm(prev_s) * np.linalg.norm(y):
                mem_s.append(prev_s)
                mem_y.append(y)
                if len(mem_s) > config.memory:
                    mem_s.pop(0)
                    mem_y.pop(0)
        if mem_s:
            direction = _quasi_newton_direction(g, mem_s, mem_y)
            slope = float(g @ direction)
        else:
            slope = 0.0
        if not mem_s or slope >= 0.0:
            mem_s.clear()
            mem_y.clear()
            direction = -(config.fallback_step / g_norm) * g
            slope = float(g @ direction)
        alpha = 1.0
        accepted = False
        for _ in range(config.max_backtracks):
            step = alpha * direction
            cand_pose = exp_se3(step[:6]).compose(pose)
            cand_a = a + step[6]
            cand_b = b + step[7]
            cand_loss, _ = masked_photometric_loss(
                gmap, cand_pose, intr, (cand_a, cand_b), image, mask,
                config.options, config.t_acc_threshold)
            if cand_loss <= loss + config.armijo_c * alpha * slope:
                accepted = True
                break
            alpha *= config.backtrack_factor
        if not accepted:
            break
        iterations = it
        decrease = loss - cand_loss
        prev_s = alpha * direction
        prev_g = g
        pose, a, b, loss = cand_pose, cand_a, cand_b, cand_loss
        if decrease < config.loss_tol:
            break

    if window is not None:
        sigma2 = gs_factor_variance(window, gmap)
    else:
        sigma2 = max(loss, 1e-6)
    return TrackingResult(pose, (a, b), loss, iterations, sigma2)


def detect_extreme_motion(poses_cw: Sequence[Pose],
                          thresholds: MotionThresholds = MotionThresholds(),
                          ) -> Tuple[bool, np.ndarray]:
    """Band check on recent per-frame travel distances.

    Returns the prune trigger (any recent translation below lambda_min or
    above lambda_max) and the translations themselves for motion_aware_prune.
    """
    if len(poses_cw) < 2:
        raise InsufficientData("need at least two poses for motion detection")
    centers = np.stack([_camera_center(p) for p in poses_cw])
    dists = np.linalg.norm(np.diff(centers, axis=0), axis=1)
    recent = dists[-thresholds.window_len:]
    trigger = bool(np.any((recent < thresholds.lambda_min)
                          | (recent > thresholds.lambda_max)))
    return trigger, recent


class DiagnosticsWriter:
    """Appends one CSV row of tracker/mapper telemetry per frame."""

    HEADER = ("frame", "tracking_loss", "iterations", "sigma2_3dgs",
              "map_size", "pruned", "keyframe")

    def __init__(self, path):
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(self.HEADER)

    def write(self, frame: int, tracking_loss: float, iterations: int,
              sigma2: float, map_size: int, pruned: int,
              keyframe: bool) -> None:
        self._writer.writerow([
            frame, f"{tracking_loss:.9g}", iterations, f"{sigma2:.9g}",
            map_size, pruned, int(keyframe),
        ])

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False
