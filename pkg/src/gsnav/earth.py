"""WGS84 ellipsoid conversions and the local East-North-Up anchor frame."""

from dataclasses import dataclass
from typing import Tuple

import numpy as np

WGS84_A = 6378137.0
WGS84_F = 1.0 / 298.257223563
WGS84_E2 = WGS84_F * (2.0 - WGS84_F)

SPEED_OF_LIGHT = 299792458.0
L1_FREQUENCY = 1575.42e6
L1_WAVELENGTH = SPEED_OF_LIGHT / L1_FREQUENCY


def geodetic_to_ecef(lat_deg: float, lon_deg: float, height: float) -> np.ndarray:
    lat = np.deg2rad(lat_deg)
    lon = np.deg2rad(lon_deg)
    sin_lat, cos_lat = np.sin(lat), np.cos(lat)
    n = WGS84_A / np.sqrt(1.0 - WGS84_E2 * sin_lat * sin_lat)
    return np.array([
        (n + height) * cos_lat * np.cos(lon),
        (n + height) * cos_lat * np.sin(lon),
        (n * (1.0 - WGS84_E2) + height) * sin_lat,
    ])


def ecef_to_geodetic(p: np.ndarray) -> Tuple[float, float, float]:
    """Iterative latitude solve; millimeter-stable for terrestrial points."""
    x, y, z = np.asarray(p, dtype=float).reshape(3)
    lon = np.arctan2(y, x)
    r = np.hypot(x, y)
    lat = np.arctan2(z, r * (1.0 - WGS84_E2))
    for _ in range(10):
        sin_lat = np.sin(lat)
        n = WGS84_A / np.sqrt(1.0 - WGS84_E2 * sin_lat * sin_lat)
        height = r / np.cos(lat) - n
        lat_new = np.arctan2(z, r * (1.0 - WGS84_E2 * n / (n + height)))
        if abs(lat_new - lat) < 1e-14:
            lat = lat_new
            break
        lat = lat_new
    sin_lat = np.sin(lat)
    n = WGS84_A / np.sqrt(1.0 - WGS84_E2 * sin_lat * sin_lat)
    height = r / np.cos(lat) - n
    return float(np.rad2deg(lat)), float(np.rad2deg(lon)), float(height)


@dataclass(frozen=True)
class EnuAnchor:
    """Fixed ECEF origin plus the rotation taking ECEF vectors to ENU."""

    origin_ecef: np.ndarray
    r_ecef_to_enu: np.ndarray

    @staticmethod
    def from_geodetic(lat_deg: float, lon_deg: float, height: float) -> "EnuAnchor":
        lat = np.deg2rad(lat_deg)
        lon = np.deg2rad(lon_deg)
        sl, cl = np.sin(lat), np.cos(lat)
        so, co = np.sin(lon), np.cos(lon)
        rot = np.array([
            [-so, co, 0.0],
            [-sl * co, -sl * so, cl],
            [cl * co, cl * so, sl],
        ])
        return EnuAnchor(geodetic_to_ecef(lat_deg, lon_deg, height), rot)

    @staticmethod
    def from_ecef(p: np.ndarray) -> "EnuAnchor":
        lat, lon, h = ecef_to_geodetic(p)
        anchor = EnuAnchor.from_geodetic(lat, lon, h)
        # keep the exact requested origin, not the geodetic round-trip
        return EnuAnchor(np.asarray(p, dtype=float).reshape(3).copy(),
                         anchor.r_ecef_to_enu)

    def to_enu(self, p_ecef: np.ndarray) -> np.ndarray:
        return self.r_ecef_to_enu @ (np.asarray(p_ecef, dtype=float) - self.origin_ecef)

    def from_enu(self, p_enu: np.ndarray) -> np.ndarray:
        return self.origin_ecef + self.r_ecef_to_enu.T @ np.asarray(p_enu, dtype=float)

    def rotate_to_enu(self, v_ecef: np.ndarray) -> np.ndarray:
        return self.r_ecef_to_enu @ np.asarray(v_ecef, dtype=float)

    def rotate_from_enu(self, v_enu: np.ndarray) -> np.ndarray:
        return self.r_ecef_to_enu.T @ np.asarray(v_enu, dtype=float)
