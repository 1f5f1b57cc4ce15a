"""Flat `key = value` configuration files with `#` comments.

Two schemas share the parser: ScenarioConfig drives the simulator and is
archived inside every dataset (so a run can recover the sensor geometry it
was recorded with), RunConfig carries the estimator toggles and thresholds.
Unknown keys and unparsable values report their line number.
"""

import math
from dataclasses import dataclass, field, fields
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import ConfigError


def parse_config(text: str) -> Dict[str, Tuple[str, int]]:
    """key -> (raw value, line number); duplicate keys keep the last line."""
    out: Dict[str, Tuple[str, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError("empty key", lineno)
        out[key] = (value.strip(), lineno)
    return out


def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_vec3(s: str) -> np.ndarray:
    parts = [float(x) for x in s.split(",")]
    if len(parts) != 3:
        raise ValueError(f"need 3 comma-separated numbers, got {len(parts)}")
    return np.array(parts)


def _parse_points(s: str) -> np.ndarray:
    rows = [r for r in (x.strip() for x in s.split(";")) if r]
    if not rows:
        raise ValueError("empty point list")
    return np.stack([_parse_vec3(r) for r in rows])


def _parse_floats(s: str) -> Tuple[float, ...]:
    rows = [r for r in (x.strip() for x in s.split(";")) if r]
    return tuple(float(r) for r in rows)


def _parse_intervals(s: str) -> Tuple[Tuple[float, float], ...]:
    rows = [r for r in (x.strip() for x in s.split(";")) if r]
    out = []
    for r in rows:
        a, _, b = r.partition(":")
        if not _:
            raise ValueError(f"interval must be 'start:end', got {r!r}")
        out.append((float(a), float(b)))
    return tuple(out)


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.12g}"
    if isinstance(v, np.ndarray):
        if v.ndim == 1:
            return ",".join(f"{x:.12g}" for x in v)
        return "; ".join(",".join(f"{x:.12g}" for x in row) for row in v)
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return "; ".join(f"{a:.12g}:{b:.12g}" for a, b in v)
        return "; ".join(f"{x:.12g}" for x in v)
    return str(v)


_PARSERS = {
    "int": int,
    "float": float,
    "bool": _parse_bool,
    "str": str,
    "vec3": _parse_vec3,
    "points": _parse_points,
    "floats": _parse_floats,
    "intervals": _parse_intervals,
}


def _load_into(cls, text: str):
    """Instantiate a config dataclass from file text, defaults elsewhere."""
    raw = parse_config(text)
    kinds = {f.name: f.metadata.get("kind", "float") for f in fields(cls)}
    kwargs = {}
    for key, (value, lineno) in raw.items():
        if key not in kinds:
            raise ConfigError(f"unknown key {key!r}", lineno)
        try:
            kwargs[key] = _PARSERS[kinds[key]](value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", lineno)
    return cls(**kwargs)


def _dump(cfg) -> str:
    lines = []
    for f in fields(cfg):
        lines.append(f"{f.name} = {_fmt_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def _f(kind: str, default):
    if isinstance(default, (np.ndarray, tuple, list)):
        return field(default_factory=lambda: default, metadata={"kind": kind})
    return field(default=default, metadata={"kind": kind})


@dataclass
class ScenarioConfig:
    """Simulator inputs: trajectory, sensor rates, noise, scene, camera."""

    name: str = _f("str", "scenario")
    seed: int = _f("int", 0)
    # trajectory: constant-speed timing over waypoints unless explicit
    # waypoint_times are given; initial_hold parks the vehicle first
    waypoints: np.ndarray = _f("points",
                               np.array([[0.0, 0.0, 1.6], [60.0, 0.0, 1.6]]))
    speed: float = _f("float", 2.0)
    initial_hold: float = _f("float", 5.0)
    waypoint_times: tuple = _f("floats", ())
    stops: tuple = _f("intervals", ())
    rate_imu_hz: float = _f("float", 100.0)
    rate_gnss_hz: float = _f("float", 1.0)
    rate_cam_hz: float = _f("float", 10.0)
    pitch: float = _f("float", 0.0)
    roll: float = _f("float", 0.0)
    # inertial truth and noise densities
    accel_noise: float = _f("float", 0.0)
    gyro_noise: float = _f("float", 0.0)
    bias_acc: np.ndarray = _f("vec3", np.zeros(3))
    bias_gyro: np.ndarray = _f("vec3", np.zeros(3))
    # gnss
    n_sats: int = _f("int", 8)
    sigma_pseudorange: float = _f("float", 0.0)
    sigma_carrier: float = _f("float", 0.0)
    sigma_doppler: float = _f("float", 0.0)
    clock_drift_g: float = _f("float", 6.0)
    outages: tuple = _f("intervals", ())
    drop_lowest: int = _f("int", 0)
    lever_arm: np.ndarray = _f("vec3", np.array([0.1, -0.2, 0.9]))
    base_offset: np.ndarray = _f("vec3", np.array([-40.0, 25.0, 2.0]))
    anchor_lat: float = _f("float", 47.3977)
    anchor_lon: float = _f("float", 8.5456)
    anchor_height: float = _f("float", 488.0)
    # camera
    cam_fx: float = _f("float", 72.0)
    cam_fy: float = _f("float", 72.0)
    cam_cx: float = _f("float", 48.0)
    cam_cy: float = _f("float", 32.0)
    cam_width: int = _f("int", 96)
    cam_height: int = _f("int", 64)
    # near plane culls ground splats passing under the camera, whose EWA
    # footprints otherwise explode across the whole image
    cam_near: float = _f("float", 1.2)
    cam_far: float = _f("float", 500.0)
    cam_t_bc: np.ndarray = _f("vec3", np.array([0.2, 0.0, 0.1]))
    brightness_amp: float = _f("float", 0.0)
    brightness_period: float = _f("float", 30.0)
    track_points: int = _f("int", 80)
    track_sigma_px: float = _f("float", 0.3)
    # scene; zero length/start derive from the waypoint extent
    scene_length: float = _f("float", 0.0)
    scene_width: float = _f("float", 10.0)
    wall_height: float = _f("float", 6.0)
    scene_spacing: float = _f("float", 0.75)
    n_boxes: int = _f("int", 10)
    scene_x_start: float = _f("float", math.nan)

    @staticmethod
    def load(text: str) -> "ScenarioConfig":
        return _load_into(ScenarioConfig, text)

    def dump(self) -> str:
        return _dump(self)


@dataclass
class RunConfig:
    """Estimator toggles and thresholds for one replay run."""

    seed: int = _f("int", 0)
    use_gs: bool = _f("bool", True)
    use_pruning: bool = _f("bool", True)
    use_weighting: bool = _f("bool", True)
    sigma2_fixed: float = _f("float", 1.0)
    # tracked frames whose photometric loss stays above this contribute no
    # splatting factor and leave the brightness model untouched
    gs_gate_loss: float = _f("float", 0.05)
    # window shapes and budgets
    window_states: int = _f("int", 10)
    window_keyframes: int = _f("int", 6)
    pixel_budget: int = _f("int", 4096)
    map_iterations: int = _f("int", 30)
    tracker_iterations: int = _f("int", 50)
    solver_iterations: int = _f("int", 50)
    init_epochs: int = _f("int", 5)
    # mapper-tracker thresholds
    theta_cov: float = _f("float", 0.9)
    theta_evict: float = _f("float", 0.3)
    lambda_min: float = _f("float", 0.05)
    lambda_max: float = _f("float", 3.0)
    lambda_isotropic: float = _f("float", 10.0)
    seed_stride: int = _f("int", 4)
    adc_interval: int = _f("int", 10)
    tile_size: int = _f("int", 16)
    # measurement sigmas and robust thresholds
    sigma_dd: float = _f("float", 1.0)
    sigma_carrier: float = _f("float", 0.01)
    sigma_doppler: float = _f("float", 0.5)
    sigma_px: float = _f("float", 1.0)
    huber_dd: float = _f("float", 3.0)
    huber_px: float = _f("float", 2.0)
    min_snr: float = _f("float", 30.0)
    min_elevation: float = _f("float", 10.0)
    # preintegration noise model
    accel_noise: float = _f("float", 0.01)
    gyro_noise: float = _f("float", 0.001)
    accel_walk: float = _f("float", 1e-4)
    gyro_walk: float = _f("float", 1e-5)
    # first-state and new-state priors
    prior_sigma_pos: float = _f("float", 5.0)
    prior_sigma_rot: float = _f("float", 0.2)
    prior_sigma_vel: float = _f("float", 1.0)
    prior_sigma_ba: float = _f("float", 0.1)
    prior_sigma_bg: float = _f("float", 0.01)
    prior_sigma_amb: float = _f("float", 50.0)
    prior_sigma_clk: float = _f("float", 10.0)
    # sparse feature handling
    max_landmarks: int = _f("int", 60)
    max_new_landmarks: int = _f("int", 8)
    min_baseline: float = _f("float", 0.3)

    def __post_init__(self):
        ranges = {
            "window_states": (2, 100), "window_keyframes": (1, 64),
            "pixel_budget": (16, 1 << 20), "init_epochs": (2, 100),
            "theta_cov": (0.0, 1.0), "theta_evict": (0.0, 1.0),
            "tile_size": (4, 128),
        }
        for name, (lo, hi) in ranges.items():
            v = getattr(self, name)
            if not lo <= v <= hi:
                raise ConfigError(
                    f"{name} = {v} outside valid range [{lo}, {hi}]")
        if not 0 < self.lambda_min < self.lambda_max:
            raise ConfigError("require 0 < lambda_min < lambda_max")
        for name in ("sigma_dd", "sigma_carrier", "sigma_doppler", "sigma_px",
                     "sigma2_fixed", "gs_gate_loss"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")

    @staticmethod
    def load(text: str) -> "RunConfig":
        return _load_into(RunConfig, text)

    def dump(self) -> str:
        return _dump(self)
