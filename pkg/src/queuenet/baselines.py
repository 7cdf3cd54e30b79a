"""Speed-threshold queue-tail detectors that use aFCD only."""

from __future__ import annotations

import numpy as np

from .domain import STEP_S, STEPS_PER_INTERVAL, SectionGeometry, SensorDay, expand_afcd, impute_missing

KMH = 3.6
OSD_THRESHOLD_KMH = 16.0
ISC_THRESHOLDS_KMH = (14.0, 16.0, 18.0, 20.0, 22.0)
ISC_CELL_M = 5.0


def osd_estimate(speeds_mps, geometry: SectionGeometry, threshold_kmh=OSD_THRESHOLD_KMH) -> float:
    """Queue tail from a single speed vector.

    The tail is the outermost boundary with a slow segment on its stop-line
    side and a fast one beyond it.
    """
    slow = np.asarray(speeds_mps, dtype=float) * KMH < threshold_kmh
    if slow.size != geometry.n_segments:
        raise ValueError(f"expected {geometry.n_segments} speeds, got {slow.size}")
    if not slow[0]:
        return 0.0
    if slow.all():
        return geometry.q_max_m
    edges = np.flatnonzero(slow[:-1] & ~slow[1:])
    return float(min(geometry.ends[edges[-1]], geometry.q_max_m))


def osd_day(day: SensorDay, geometry: SectionGeometry, threshold_kmh=OSD_THRESHOLD_KMH) -> np.ndarray:
    speeds = expand_afcd(impute_missing(day.afcd_speeds), day.n_steps)
    per_interval = {}
    out = np.empty(day.n_steps)
    for t in range(day.n_steps):
        j = t // STEPS_PER_INTERVAL
        if j not in per_interval:
            per_interval[j] = osd_estimate(speeds[:, t], geometry, threshold_kmh)
        out[t] = per_interval[j]
    return out


def _interp_matrix(targets, nodes):
    """Rows of linear-interpolation weights, flat beyond the end nodes."""
    eye = np.eye(nodes.size)
    return np.stack([np.interp(targets, nodes, eye[k]) for k in range(nodes.size)], axis=1)


def isc_field(afcd, geometry: SectionGeometry, n_steps: int, cell_m=ISC_CELL_M):
    """Bilinear speed field on a ``cell_m`` x 10 s grid; returns ``(positions, field)``."""
    afcd = np.atleast_2d(np.asarray(afcd, dtype=float))
    centers = 0.5 * (geometry.starts + geometry.ends)
    positions = np.arange(0.0, geometry.length_m + 1e-9, cell_m)
    interval_mid = (np.arange(afcd.shape[1]) + 0.5) * STEP_S * STEPS_PER_INTERVAL
    step_mid = (np.arange(n_steps) + 0.5) * STEP_S
    space = _interp_matrix(positions, centers)  # (P, N)
    time = _interp_matrix(step_mid, interval_mid)  # (T, K)
    return positions, space @ afcd @ time.T  # (P, T)


def isc_estimate(afcd, geometry: SectionGeometry, n_steps=None, thresholds_kmh=ISC_THRESHOLDS_KMH,
                 cell_m=ISC_CELL_M) -> np.ndarray:
    """Mean over thresholds of the farthest grid position slower than each threshold."""
    afcd = np.atleast_2d(np.asarray(afcd, dtype=float))
    if np.isnan(afcd).any():
        afcd = impute_missing(afcd)
    n_steps = afcd.shape[1] * STEPS_PER_INTERVAL if n_steps is None else n_steps
    positions, field = isc_field(afcd, geometry, n_steps, cell_m)
    kmh = field * KMH
    estimates = []
    for th in thresholds_kmh:
        below = kmh < th
        far = below.shape[0] - 1 - np.argmax(below[::-1], axis=0)
        estimates.append(np.where(below.any(axis=0), positions[far], 0.0))
    return np.minimum(np.mean(estimates, axis=0), geometry.q_max_m)


def isc_day(day: SensorDay, geometry: SectionGeometry, **kw) -> np.ndarray:
    return isc_estimate(day.afcd_speeds, geometry, day.n_steps, **kw)
