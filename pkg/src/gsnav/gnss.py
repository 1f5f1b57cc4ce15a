"""GNSS double-difference / single-difference measurement models.

Conventions, shared by the simulator and the estimator so that noise-free
residuals cancel exactly:

- Satellites are static in ECEF over a run (high shell, minutes-long runs).
- DD pseudorange (meters): between-receiver single differences against a
  fixed base, then differenced against the pivot satellite (highest
  elevation).  Receiver/satellite clocks and atmosphere cancel by
  construction.
- SD carrier phase (meters): between-receiver single difference plus
  lambda * N^s with a per-satellite float ambiguity N^s in cycles.  Clock
  terms are already removed in the simulated observable.
- Doppler (Hz): -range_rate / lambda + df_r with a per-constellation
  receiver clock-drift term df_r in Hz.  Satellite velocity is zero.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from .earth import EnuAnchor, L1_WAVELENGTH
from .errors import InsufficientSatellites
from .geometry import skew

__all__ = [
    "GnssEpoch",
    "receiver_position_ecef",
    "sd_pseudorange",
    "predicted_sd_carrier",
    "predicted_doppler",
    "elevation_deg",
    "constellation_of",
    "gnss_dd_residuals",
    "GnssResiduals",
    "snap_position",
]


def receiver_position_ecef(anchor: EnuAnchor, p_w: np.ndarray,
                           r_wb: np.ndarray, lever: np.ndarray) -> np.ndarray:
    """Antenna phase center in ECEF from the body position in anchored ENU."""
    return anchor.from_enu(p_w + r_wb @ lever)


def sd_pseudorange(rcv_ecef: np.ndarray, base_ecef: np.ndarray,
                   sat_pos: np.ndarray) -> float:
    return float(np.linalg.norm(rcv_ecef - sat_pos)
                 - np.linalg.norm(base_ecef - sat_pos))


def predicted_sd_carrier(rcv_ecef: np.ndarray, base_ecef: np.ndarray,
                         sat_pos: np.ndarray, n_cycles: float) -> float:
    return sd_pseudorange(rcv_ecef, base_ecef, sat_pos) + L1_WAVELENGTH * n_cycles


def predicted_doppler(rcv_ecef: np.ndarray, v_ecef: np.ndarray,
                      sat_pos: np.ndarray, drift_hz: float) -> float:
    diff = rcv_ecef - sat_pos
    u = diff / np.linalg.norm(diff)
    return float(-(u @ v_ecef) / L1_WAVELENGTH + drift_hz)


def elevation_deg(rcv_ecef: np.ndarray, sat_pos: np.ndarray,
                  anchor: EnuAnchor) -> float:
    """Elevation above the anchor's horizon plane (good at desk scale)."""
    los = anchor.rotate_to_enu(sat_pos - rcv_ecef)
    los = los / np.linalg.norm(los)
    return float(np.rad2deg(np.arcsin(np.clip(los[2], -1.0, 1.0))))


def constellation_of(sat_id: str) -> str:
    return sat_id[0] if sat_id and sat_id[0].isalpha() else "G"


@dataclass
class GnssEpoch:
    """One epoch of differenced observations against a fixed base receiver.

    Arrays are aligned with ``sat_ids``.  The pivot satellite's own DD
    pseudorange entry is zero by construction.
    """

    t: float
    base_ecef: np.ndarray
    sat_ids: List[str]
    sat_pos: np.ndarray          # (n, 3) ECEF meters
    dd_pseudorange: np.ndarray   # (n,) meters, vs pivot
    sd_carrier: np.ndarray       # (n,) meters
    doppler: np.ndarray          # (n,) Hz
    elevation: np.ndarray        # (n,) degrees
    snr: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.sat_ids)
        if self.snr is None:
            self.snr = np.full(n, 45.0)
        for name in ("dd_pseudorange", "sd_carrier", "doppler", "elevation", "snr"):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(n)
            setattr(self, name, arr)
        self.sat_pos = np.asarray(self.sat_pos, dtype=float).reshape(n, 3)
        self.base_ecef = np.asarray(self.base_ecef, dtype=float).reshape(3)

    @property
    def n_sats(self) -> int:
        return len(self.sat_ids)

    def pivot_index(self) -> int:
        """Highest elevation; exact ties broken by satellite id."""
        order = sorted(range(self.n_sats),
                       key=lambda i: (-self.elevation[i], self.sat_ids[i]))
        return order[0]

    def filtered(self, min_snr: float = 0.0, min_elevation: float = 0.0) -> "GnssEpoch":
        keep = (self.snr >= min_snr) & (self.elevation >= min_elevation)
        idx = np.flatnonzero(keep)
        return GnssEpoch(
            t=self.t, base_ecef=self.base_ecef,
            sat_ids=[self.sat_ids[i] for i in idx],
            sat_pos=self.sat_pos[idx], dd_pseudorange=self.dd_pseudorange[idx],
            sd_carrier=self.sd_carrier[idx], doppler=self.doppler[idx],
            elevation=self.elevation[idx], snr=self.snr[idx])


@dataclass
class GnssResiduals:
    """Stacked [DD pseudorange | SD carrier | Doppler] residuals.

    ``j_nav`` columns follow the navigation tangent order
    [dp, dtheta, dv, dba, dbg].  ``j_amb`` columns align with ``amb_ids``
    (all satellites, epoch order); ``j_drift`` columns with ``drift_ids``.
    """

    r: np.ndarray
    j_nav: np.ndarray
    amb_ids: List[str]
    j_amb: np.ndarray
    drift_ids: List[str]
    j_drift: np.ndarray
    pivot: str
    n_dd: int
    n_carrier: int
    n_doppler: int


def _line_of_sight_enu(rcv_ecef: np.ndarray, sat_pos: np.ndarray,
                       anchor: EnuAnchor) -> Tuple[np.ndarray, np.ndarray]:
    """Unit vectors (receiver - satellite)/range, in ECEF and anchor ENU."""
    diff = rcv_ecef[None, :] - sat_pos
    rng = np.linalg.norm(diff, axis=1)
    u_ecef = diff / rng[:, None]
    u_enu = u_ecef @ anchor.r_ecef_to_enu.T
    return u_ecef, u_enu


def gnss_dd_residuals(nav, gnss, epoch: GnssEpoch, anchor: EnuAnchor) -> GnssResiduals:
    """Residuals and Jacobians for one epoch at the given state.

    ``nav`` provides p/rot/v (ENU-anchored world frame, right-perturbed
    rotation); ``gnss`` provides the lever arm, per-satellite ambiguities,
    and per-constellation clock drifts.  Raises InsufficientSatellites when
    fewer than two satellites are visible (no double difference exists).
    """
    n = epoch.n_sats
    if n < 2:
        raise InsufficientSatellites(
            f"epoch t={epoch.t:g} has {n} satellite(s); need >= 2")

    r_wb = nav.rot.matrix()
    lever = np.asarray(gnss.lever_arm, dtype=float)
    rcv = receiver_position_ecef(anchor, nav.p, r_wb, lever)
    u_ecef, u_enu = _line_of_sight_enu(rcv, epoch.sat_pos, anchor)

    # d(range)/d(p_enu) = u_enu ; d(rcv_enu)/d(dtheta) = -R_WB hat(lever)
    d_rcv_dtheta = -r_wb @ skew(lever)
    drho_dp = u_enu
    drho_dth = u_enu @ d_rcv_dtheta

    pivot = epoch.pivot_index()
    pivot_id = epoch.sat_ids[pivot]
    sd_model = np.array([sd_pseudorange(rcv, epoch.base_ecef, epoch.sat_pos[i])
                         for i in range(n)])

    others = [i for i in range(n) if i != pivot]
    n_dd = len(others)
    amb_ids = list(epoch.sat_ids)
    drift_ids = sorted({constellation_of(s) for s in epoch.sat_ids})
    drift_col = {c: k for k, c in enumerate(drift_ids)}

    m = n_dd + n + n
    r = np.zeros(m)
    j_nav = np.zeros((m, 15))
    j_amb = np.zeros((m, n))
    j_drift = np.zeros((m, len(drift_ids)))

    # DD pseudorange rows: z - [(sd_s) - (sd_pivot)]
    for row, i in enumerate(others):
        r[row] = epoch.dd_pseudorange[i] - (sd_model[i] - sd_model[pivot])
        j_nav[row, 0:3] = -(drho_dp[i] - drho_dp[pivot])
        j_nav[row, 3:6] = -(drho_dth[i] - drho_dth[pivot])

    # SD carrier rows: z - (sd_s + lambda N_s)
    for i in range(n):
        row = n_dd + i
        n_s = gnss.ambiguities[epoch.sat_ids[i]]
        r[row] = epoch.sd_carrier[i] - (sd_model[i] + L1_WAVELENGTH * n_s)
        j_nav[row, 0:3] = -drho_dp[i]
        j_nav[row, 3:6] = -drho_dth[i]
        j_amb[row, i] = -L1_WAVELENGTH

    # Doppler rows: z - (-u.v/lambda + df)
    v_ecef = anchor.rotate_from_enu(nav.v)
    for i in range(n):
        row = n_dd + n + i
        c = constellation_of(epoch.sat_ids[i])
        df = gnss.clock_drift.get(c, 0.0)
        r[row] = epoch.doppler[i] - predicted_doppler(rcv, v_ecef,
                                                      epoch.sat_pos[i], df)
        j_nav[row, 6:9] = u_enu[i] / L1_WAVELENGTH
        j_drift[row, drift_col[c]] = -1.0

    return GnssResiduals(r=r, j_nav=j_nav, amb_ids=amb_ids, j_amb=j_amb,
                         drift_ids=drift_ids, j_drift=j_drift, pivot=pivot_id,
                         n_dd=n_dd, n_carrier=n, n_doppler=n)


def snap_position(epoch: GnssEpoch, anchor: EnuAnchor,
                  p0_enu: np.ndarray = None, iterations: int = 10) -> np.ndarray:
    """Antenna position in anchored ENU from one epoch's DD pseudoranges.

    Gauss-Newton on the n-1 double differences; needs >= 4 satellites for a
    3D fix.  The lever arm is not applied here; callers that want the body
    position subtract the rotated lever themselves.
    """
    if epoch.n_sats < 4:
        raise InsufficientSatellites(
            f"epoch t={epoch.t:g} has {epoch.n_sats} satellite(s); need >= 4 "
            "for a position fix")
    p = np.zeros(3) if p0_enu is None else np.asarray(p0_enu, dtype=float).copy()
    pivot = epoch.pivot_index()
    others = [i for i in range(epoch.n_sats) if i != pivot]
    for _ in range(iterations):
        rcv = anchor.from_enu(p)
        _, u_enu = _line_of_sight_enu(rcv, epoch.sat_pos, anchor)
        sd = np.array([sd_pseudorange(rcv, epoch.base_ecef, epoch.sat_pos[i])
                       for i in range(epoch.n_sats)])
        rows = np.array([u_enu[i] - u_enu[pivot] for i in others])
        res = np.array([epoch.dd_pseudorange[i] - (sd[i] - sd[pivot])
                        for i in others])
        delta, *_ = np.linalg.lstsq(rows, res, rcond=None)
        p += delta
        if np.linalg.norm(delta) < 1e-10:
            break
    return p
