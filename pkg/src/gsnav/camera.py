"""Pinhole camera intrinsics and point projection helpers.

Pixel coordinates sample at integer centers: a 3D point that projects to
(u, v) lands on the pixel at column round(u), row round(v).  The camera
frame is right-handed with +z forward (optical axis), +x right, +y down.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.1
    far: float = 1000.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise ValueError("require 0 < near < far")

    def project(self, pts_cam) -> np.ndarray:
        """Camera-frame points (N,3) or (3,) to pixel coordinates (N,2)/(2,)."""
        pts = np.asarray(pts_cam, dtype=float)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        z = pts[:, 2]
        if np.any(z <= 0):
            raise BehindCamera("point has non-positive camera depth")
        uv = np.stack(
            [self.fx * pts[:, 0] / z + self.cx, self.fy * pts[:, 1] / z + self.cy], axis=1
        )
        return uv[0] if single else uv

    def backproject(self, u, v, depth) -> np.ndarray:
        """Pixel (u, v) at camera depth z back to the camera frame."""
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        depth = np.asarray(depth, dtype=float)
        return np.stack(
            [(u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth],
            axis=-1,
        )

    def contains(self, uv, margin: float = 0.0) -> np.ndarray:
        uv = np.atleast_2d(np.asarray(uv, dtype=float))
        return (
            (uv[:, 0] >= -margin)
            & (uv[:, 0] <= self.width - 1 + margin)
            & (uv[:, 1] >= -margin)
            & (uv[:, 1] <= self.height - 1 + margin)
        )
