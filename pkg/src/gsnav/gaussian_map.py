"""The Gaussian scene map: storage, seeding, densification, pruning.

Primitives are stored struct-of-arrays for the rasterizer; `primitive(i)`
materializes a record view.  Row indices handed to callers stay valid until
the next structural mutation, which increments the generation counter; stale
indices are guarded by generation stamps (see RayOpacityTable).

Mutation is single-writer: all operations here require exclusive access.
Readers that need a stable view across mutations take `snapshot()`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraIntrinsics
from .errors import DataError, DimensionMismatch, EmptyMask, StaleRayTable
from .geometry import Pose, Rot3
from .images import gradient_mask

MAP_MAGIC = b"GSMAP1\x00\x00"
MAP_VERSION = 1

_RECORD_DTYPE = np.dtype(
    [
        ("mean", "<f4", 3),
        ("quat", "<f4", 4),
        ("log_scale", "<f4", 3),
        ("logit_opacity", "<f4"),
        ("color", "<f4", 3),
        ("birth_kf", "<u4"),
    ]
)


@dataclass(frozen=True)
class MotionThresholds:
    """Relative-translation band for the motion-aware pruning trigger."""

    lambda_min: float = 0.05
    lambda_max: float = 3.0
    window_len: int = 10

    def __post_init__(self):
        if not (0 < self.lambda_min < self.lambda_max):
            raise ValueError("require 0 < lambda_min < lambda_max")


@dataclass
class DepthInit:
    """Seeding depth model: median scene depth plus heavy noise, clamped.

    New primitives start far from their true surface on purpose; the map
    optimizer pulls them into place, and the wide spread avoids a degenerate
    all-at-one-depth initialization.
    """

    fallback_depth: float = 20.0
    noise_scale: float = 0.5
    min_depth: float = 0.5
    max_depth: float = 200.0
    seed: int = 0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)

    def draw(self, median_depth: float, n: int) -> np.ndarray:
        d = median_depth
        draws = d + self.rng.standard_normal(n) * (self.noise_scale * d)
        return np.clip(draws, self.min_depth, self.max_depth)


@dataclass(frozen=True)
class GaussianPrimitive:
    """Record view of one primitive (a copy; mutate through the map)."""

    mean: np.ndarray
    rotation: Rot3
    log_scale: np.ndarray
    logit_opacity: float
    color: np.ndarray
    birth_keyframe: int

    @property
    def opacity(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.logit_opacity)))

    def covariance(self) -> np.ndarray:
        w = self.rotation.matrix()
        return w @ np.diag(np.exp(2.0 * self.log_scale)) @ w.T


@dataclass
class RayOpacityTable:
    """Per-ray depth-ordered (row index, alpha') lists from one render.

    Built for rays that hit latest-keyframe primitives; row indices are only
    meaningful for the map generation the table was rendered against.
    CSR layout: ray k owns entries ray_ptr[k]:ray_ptr[k+1].
    """

    generation: int
    ray_ptr: np.ndarray
    ids: np.ndarray
    alphas: np.ndarray

    @property
    def n_rays(self) -> int:
        return len(self.ray_ptr) - 1


class GaussianMap:
    """Struct-of-arrays store for Gaussian primitives plus ADC accumulators."""

    def __init__(self, seed: int = 0):
        self.means = np.zeros((0, 3))
        self.quats = np.zeros((0, 4))
        self.log_scales = np.zeros((0, 3))
        self.logit_opacities = np.zeros(0)
        self.colors = np.zeros((0, 3))
        self.birth_kf = np.zeros(0, dtype=np.int64)
        self.accum_grad = np.zeros(0)
        self.accum_vis = np.zeros(0, dtype=np.int64)
        self.accum_radius = np.zeros(0)
        self.generation = 0
        self.rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return self.means.shape[0]

    # -- record access ------------------------------------------------------

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            mean=self.means[i].copy(),
            rotation=Rot3(self.quats[i]),
            log_scale=self.log_scales[i].copy(),
            logit_opacity=float(self.logit_opacities[i]),
            color=np.clip(self.colors[i], 0.0, 1.0),
            birth_keyframe=int(self.birth_kf[i]),
        )

    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logit_opacities))

    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def rotations(self) -> np.ndarray:
        """Unit rotation matrices (N, 3, 3) from the stored quaternions."""
        q = self.quats / np.linalg.norm(self.quats, axis=1, keepdims=True)
        w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
        m = np.empty((len(self), 3, 3))
        m[:, 0, 0] = 1 - 2 * (y * y + z * z)
        m[:, 0, 1] = 2 * (x * y - w * z)
        m[:, 0, 2] = 2 * (x * z + w * y)
        m[:, 1, 0] = 2 * (x * y + w * z)
        m[:, 1, 1] = 1 - 2 * (x * x + z * z)
        m[:, 1, 2] = 2 * (y * z - w * x)
        m[:, 2, 0] = 2 * (x * z - w * y)
        m[:, 2, 1] = 2 * (y * z + w * x)
        m[:, 2, 2] = 1 - 2 * (x * x + y * y)
        return m

    def covariances_world(self) -> np.ndarray:
        """Sigma_W = R diag(exp(2 s)) R^T for every primitive, (N, 3, 3)."""
        r = self.rotations()
        s2 = np.exp(2.0 * self.log_scales)
        return np.einsum("nij,nj,nkj->nik", r, s2, r)

    def snapshot(self) -> "GaussianMap":
        """Deep copy for concurrent readers (pipelined mode)."""
        out = GaussianMap()
        for name in (
            "means",
            "quats",
            "log_scales",
            "logit_opacities",
            "colors",
            "birth_kf",
            "accum_grad",
            "accum_vis",
            "accum_radius",
        ):
            setattr(out, name, getattr(self, name).copy())
        out.generation = self.generation
        return out

    # -- mutation -----------------------------------------------------------

    def add(self, means, quats, log_scales, logit_opacities, colors, birth_kf) -> np.ndarray:
        means = np.atleast_2d(np.asarray(means, dtype=float))
        n = means.shape[0]
        quats = np.asarray(quats, dtype=float).reshape(n, 4)
        quats = quats / np.linalg.norm(quats, axis=1, keepdims=True)
        start = len(self)
        self.means = np.concatenate([self.means, means])
        self.quats = np.concatenate([self.quats, quats])
        self.log_scales = np.concatenate(
            [self.log_scales, np.asarray(log_scales, dtype=float).reshape(n, 3)]
        )
        self.logit_opacities = np.concatenate(
            [self.logit_opacities, np.asarray(logit_opacities, dtype=float).reshape(n)]
        )
        self.colors = np.concatenate([self.colors, np.asarray(colors, dtype=float).reshape(n, 3)])
        self.birth_kf = np.concatenate(
            [self.birth_kf, np.asarray(birth_kf, dtype=np.int64).reshape(n)]
        )
        self.accum_grad = np.concatenate([self.accum_grad, np.zeros(n)])
        self.accum_vis = np.concatenate([self.accum_vis, np.zeros(n, dtype=np.int64)])
        self.accum_radius = np.concatenate([self.accum_radius, np.zeros(n)])
        self.generation += 1
        return np.arange(start, start + n)

    def remove(self, rows) -> int:
        rows = np.unique(np.asarray(rows, dtype=np.int64))
        if rows.size == 0:
            return 0
        keep = np.ones(len(self), dtype=bool)
        keep[rows] = False
        self._apply_keep(keep)
        self.generation += 1
        return int(rows.size)

    def _apply_keep(self, keep: np.ndarray) -> None:
        self.means = self.means[keep]
        self.quats = self.quats[keep]
        self.log_scales = self.log_scales[keep]
        self.logit_opacities = self.logit_opacities[keep]
        self.colors = self.colors[keep]
        self.birth_kf = self.birth_kf[keep]
        self.accum_grad = self.accum_grad[keep]
        self.accum_vis = self.accum_vis[keep]
        self.accum_radius = self.accum_radius[keep]

    def accumulate_stats(self, rows, grad_mags, radii) -> None:
        """Fold one backward pass into the densification accumulators."""
        rows = np.asarray(rows, dtype=np.int64)
        self.accum_grad[rows] += np.asarray(grad_mags, dtype=float)
        self.accum_vis[rows] += 1
        self.accum_radius[rows] = np.maximum(
            self.accum_radius[rows], np.asarray(radii, dtype=float)
        )

    def reset_accumulators(self) -> None:
        self.accum_grad[:] = 0.0
        self.accum_vis[:] = 0
        self.accum_radius[:] = 0.0


# -- operations ---------------------------------------------------------------


def median_scene_depth(gmap: GaussianMap, pose_cw: Pose, fallback: float = 20.0) -> float:
    """Median camera-frame depth of the current map; fallback when empty."""
    if len(gmap) == 0:
        return fallback
    z = gmap.means @ pose_cw.rotation.matrix()[2] + pose_cw.translation[2]
    z = z[z > 0]
    return float(np.median(z)) if z.size else fallback


def seed_from_frame(
    gmap: GaussianMap,
    image: np.ndarray,
    pose_cw: Pose,
    intrinsics: CameraIntrinsics,
    depth_model: DepthInit,
    birth_keyframe: int,
    stride: int = 4,
    mask: np.ndarray | None = None,
    sobel_threshold: float = 0.05,
) -> np.ndarray:
    """Spawn one primitive per stride-sampled masked pixel of the frame.

    Pixels are back-projected at depths drawn from depth_model around the
    current median scene depth; color comes from the pixel, opacity starts
    at the 0.5 midpoint, and scale at d/fx per axis.
    Returns the new row indices (valid until the next mutation).
    """
    image = np.asarray(image, dtype=float)
    if image.shape[0] != intrinsics.height or image.shape[1] != intrinsics.width:
        raise DimensionMismatch(
            f"image {image.shape[:2]} does not match intrinsics "
            f"{(intrinsics.height, intrinsics.width)}"
        )
    if mask is None:
        mask = gradient_mask(image, sobel_threshold)
    sampled = np.zeros_like(mask)
    sampled[::stride, ::stride] = True
    rows_px, cols_px = np.nonzero(mask & sampled)
    if rows_px.size == 0:
        raise EmptyMask("no masked pixels survive stride sampling")

    median = median_scene_depth(gmap, pose_cw, depth_model.fallback_depth)
    depths = depth_model.draw(median, rows_px.size)
    pts_cam = intrinsics.backproject(cols_px.astype(float), rows_px.astype(float), depths)
    means_w = pose_cw.inverse().transform(pts_cam)

    n = rows_px.size
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    log_scales = np.repeat(np.log(depths / intrinsics.fx)[:, None], 3, axis=1)
    colors = np.clip(image[rows_px, cols_px], 0.0, 1.0)
    return gmap.add(means_w, quats, log_scales, np.zeros(n), colors, np.full(n, birth_keyframe))


def isotropic_loss(gmap: GaussianMap) -> float:
    """Sum over primitives of the L1 spread of scales around their mean."""
    if len(gmap) == 0:
        raise ValueError("isotropic_loss requires a nonempty map")
    s = gmap.scales()
    return float(np.sum(np.abs(s - s.mean(axis=1, keepdims=True))))


def isotropic_loss_grad(gmap: GaussianMap) -> tuple[float, np.ndarray]:
    """Loss plus its gradient with respect to log_scale, used by the mapper."""
    s = gmap.scales()
    dev = s - s.mean(axis=1, keepdims=True)
    loss = float(np.sum(np.abs(dev)))
    sign = np.sign(dev)
    # d|s_k - mean(s)|/ds_m = sign_k (delta_km - 1/3); chain ds/dlog = s
    g_s = sign - sign.mean(axis=1, keepdims=True)
    return loss, g_s * s


def motion_aware_prune(
    gmap: GaussianMap,
    recent_translations,
    latest_kf_primitives,
    ray_table: RayOpacityTable,
    th: MotionThresholds,
) -> int:
    """Remove redundant near-field occluders after an extreme-motion window.

    Triggered when any of the recent relative translations falls outside
    (lambda_min, lambda_max).  Per ray, the depth-ordered primitives in
    front of the latest-keyframe ones are scanned; from the first index at
    which their cumulative alpha' reaches 0.5, the rest of that front
    suffix is removed.  Latest-keyframe primitives are never removed.
    """
    if ray_table.generation != gmap.generation:
        raise StaleRayTable(
            f"ray table generation {ray_table.generation} != map generation {gmap.generation}"
        )
    t = np.asarray(recent_translations, dtype=float)[-th.window_len :]
    if t.size == 0 or not np.any((t < th.lambda_min) | (t > th.lambda_max)):
        return 0

    latest = np.asarray(sorted(latest_kf_primitives), dtype=np.int64)
    doomed: set[int] = set()
    for k in range(ray_table.n_rays):
        lo, hi = int(ray_table.ray_ptr[k]), int(ray_table.ray_ptr[k + 1])
        ids = ray_table.ids[lo:hi]
        alphas = ray_table.alphas[lo:hi]
        is_latest = np.isin(ids, latest)
        if not np.any(is_latest):
            continue
        front_end = int(np.argmax(is_latest))  # first latest-kf hit on the ray
        if front_end == 0:
            continue
        csum = np.cumsum(alphas[:front_end])
        crossing = np.nonzero(csum >= 0.5)[0]
        if crossing.size == 0:
            continue
        doomed.update(int(i) for i in ids[crossing[0] : front_end])
    doomed.difference_update(int(i) for i in latest)
    if not doomed:
        return 0
    return gmap.remove(np.fromiter(doomed, dtype=np.int64))


def adaptive_density_control(
    gmap: GaussianMap,
    grad_threshold: float,
    scale_threshold: float,
    opacity_floor: float = 0.05,
    radius_ceiling: float | None = None,
) -> tuple[int, int, int]:
    """Clone/split high-gradient primitives, drop faint or bloated ones.

    Over-threshold primitives with max scale <= scale_threshold are cloned
    in place; larger ones are replaced by two children with scales / 1.6
    sampled from the parent distribution.  Returns (n_split, n_cloned,
    n_pruned) and resets the accumulators.
    """
    n = len(gmap)
    if n == 0:
        gmap.reset_accumulators()
        return (0, 0, 0)
    vis = np.maximum(gmap.accum_vis, 1)
    mean_grad = gmap.accum_grad / vis
    max_scale = gmap.scales().max(axis=1)

    prune = gmap.opacities() < opacity_floor
    if radius_ceiling is not None:
        prune |= gmap.accum_radius > radius_ceiling
    over = (mean_grad > grad_threshold) & ~prune
    clone = over & (max_scale <= scale_threshold)
    split = over & (max_scale > scale_threshold)

    n_cloned = int(np.count_nonzero(clone))
    n_split = int(np.count_nonzero(split))
    n_pruned = int(np.count_nonzero(prune))

    new_fields = None
    if n_split:
        parents = np.nonzero(split)[0]
        cov = gmap.covariances_world()[parents]
        chol = np.linalg.cholesky(cov)
        draws = gmap.rng.standard_normal((parents.size, 2, 3))
        child_means = gmap.means[parents][:, None, :] + np.einsum(
            "nij,ncj->nci", chol, draws
        )
        rep = np.repeat(parents, 2)
        new_fields = (
            child_means.reshape(-1, 3),
            gmap.quats[rep],
            gmap.log_scales[rep] - np.log(1.6),
            gmap.logit_opacities[rep],
            gmap.colors[rep],
            gmap.birth_kf[rep],
        )
    clone_rows = np.nonzero(clone)[0]

    changed = n_split or n_cloned or n_pruned
    if changed:
        keep = ~(prune | split)
        clones = (
            gmap.means[clone_rows],
            gmap.quats[clone_rows],
            gmap.log_scales[clone_rows],
            gmap.logit_opacities[clone_rows],
            gmap.colors[clone_rows],
            gmap.birth_kf[clone_rows],
        )
        gmap._apply_keep(keep)
        if n_cloned:
            gmap.add(*clones)
        if new_fields is not None:
            gmap.add(*new_fields)
        gmap.generation += 1
    gmap.reset_accumulators()
    return (n_split, n_cloned, n_pruned)


def remove_keyframe_gaussians(
    gmap: GaussianMap, keyframe_id: int, min_visibility: int = 3
) -> int:
    """Drop primitives born at an evicted keyframe unless well observed."""
    rows = np.nonzero(
        (gmap.birth_kf == keyframe_id) & (gmap.accum_vis < min_visibility)
    )[0]
    if rows.size == 0:
        return 0
    return gmap.remove(rows)


# -- serialization ------------------------------------------------------------


def save_map(gmap: GaussianMap, path) -> None:
    """Write the little-endian binary record stream with GSMAP1 header."""
    records = np.empty(len(gmap), dtype=_RECORD_DTYPE)
    records["mean"] = gmap.means
    records["quat"] = gmap.quats
    records["log_scale"] = gmap.log_scales
    records["logit_opacity"] = gmap.logit_opacities
    records["color"] = gmap.colors
    records["birth_kf"] = gmap.birth_kf
    with open(path, "wb") as f:
        f.write(MAP_MAGIC)
        f.write(struct.pack("<II", len(gmap), MAP_VERSION))
        f.write(records.tobytes())


def load_map(path, seed: int = 0) -> GaussianMap:
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) != 16 or header[:8] != MAP_MAGIC:
            raise DataError(f"{path}: not a GSMAP1 file")
        count, version = struct.unpack("<II", header[8:])
        if version != MAP_VERSION:
            raise DataError(f"{path}: unsupported map version {version}")
        payload = f.read(count * _RECORD_DTYPE.itemsize)
    if len(payload) != count * _RECORD_DTYPE.itemsize:
        raise DataError(f"{path}: truncated record stream")
    records = np.frombuffer(payload, dtype=_RECORD_DTYPE)
    gmap = GaussianMap(seed=seed)
    if count:
        gmap.add(
            records["mean"].astype(float),
            records["quat"].astype(float),
            records["log_scale"].astype(float),
            records["logit_opacity"].astype(float),
            records["color"].astype(float),
            records["birth_kf"].astype(np.int64),
        )
    gmap.generation = 0
    return gmap


def export_text(gmap: GaussianMap, path) -> None:
    """Debug export: one primitive per line, space-separated fields."""
    with open(path, "w") as f:
        f.write("# mean_xyz quat_wxyz log_scale_xyz logit_opacity color_rgb birth_kf\n")
        for i in range(len(gmap)):
            fields = np.concatenate(
                [
                    gmap.means[i],
                    gmap.quats[i],
                    gmap.log_scales[i],
                    [gmap.logit_opacities[i]],
                    gmap.colors[i],
                ]
            )
            f.write(" ".join(f"{v:.9g}" for v in fields) + f" {int(gmap.birth_kf[i])}\n")
