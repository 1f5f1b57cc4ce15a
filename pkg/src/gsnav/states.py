"""Estimator state blocks and their tangent-space retractions.

Conventions: world frame is ENU anchored at the first GNSS fix.  NavState
rotation q_WB maps body to world and is perturbed on the right (body-frame
tangent); position, velocity, and biases are world/body vectors updated
additively.  The 15-dim nav tangent is ordered [dp, dtheta, dv, dba, dbg].
"""

from dataclasses import dataclass, field, replace
from typing import Dict, Tuple

import numpy as np

from .geometry import Pose, Rot3

NAV_DIM = 15


@dataclass
class NavState:
    p: np.ndarray
    rot: Rot3
    v: np.ndarray
    ba: np.ndarray
    bg: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float).reshape(3)
        self.v = np.asarray(self.v, dtype=float).reshape(3)
        self.ba = np.asarray(self.ba, dtype=float).reshape(3)
        self.bg = np.asarray(self.bg, dtype=float).reshape(3)

    @staticmethod
    def identity(t: float = 0.0) -> "NavState":
        z = np.zeros(3)
        return NavState(z, Rot3.identity(), z, z, z, t)

    def pose_wb(self) -> Pose:
        return Pose(self.rot, self.p)

    def retract(self, delta: np.ndarray) -> "NavState":
        d = np.asarray(delta, dtype=float).reshape(NAV_DIM)
        return NavState(
            self.p + d[0:3],
            self.rot * Rot3.exp(d[3:6]),
            self.v + d[6:9],
            self.ba + d[9:12],
            self.bg + d[12:15],
            self.t,
        )

    def copy(self) -> "NavState":
        return NavState(self.p.copy(), self.rot, self.v.copy(),
                        self.ba.copy(), self.bg.copy(), self.t)


@dataclass
class GnssState:
    """Receiver-side GNSS unknowns beyond the nav states.

    Ambiguities are float-valued single-difference carrier cycles per
    satellite; clock_drift holds the per-constellation receiver clock-drift
    frequency offset (Hz) entering the Doppler model.  The lever arm is the
    body-frame antenna offset, fixed unless estimation is enabled.
    """

    lever_arm: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ambiguities: Dict[str, float] = field(default_factory=dict)
    clock_drift: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.lever_arm = np.asarray(self.lever_arm, dtype=float).reshape(3)


@dataclass
class CamState:
    """Camera extrinsic (body frame) and the tracked landmark table (ENU)."""

    t_bc: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rot_bc: Rot3 = field(default_factory=Rot3.identity)
    landmarks: Dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.t_bc = np.asarray(self.t_bc, dtype=float).reshape(3)

    def body_from_camera(self) -> Pose:
        return Pose(self.rot_bc, self.t_bc)

    def camera_pose_cw(self, nav: NavState) -> Pose:
        """Camera-from-world pose for a body state."""
        return nav.pose_wb().compose(self.body_from_camera()).inverse()
