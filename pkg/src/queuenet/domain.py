"""Core value types, time-base alignment and missing-value handling.

All series live on a 10 s base grid. aFCD speeds arrive per 60 s interval and
are stored as an ``(n_segments, n_intervals)`` array with ``NaN`` marking a
missing entry.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Optional, Sequence

import numpy as np

from .exceptions import AlignmentError, DataError

STEP_S = 10
AFCD_INTERVAL_S = 60
STEPS_PER_INTERVAL = AFCD_INTERVAL_S // STEP_S
DAY_START = "06:00"
DAY_STEPS = 5040  # 06:00-20:00


@dataclass(frozen=True)
class SectionGeometry:
    """Static description of a road section.

    Segment boundaries are measured in meters from the stop line, ordered
    outward, and must tile ``[0, segments[-1][1]]`` without gaps.
    """

    length_m: float
    lanes: int
    segments: tuple
    q_max_m: float
    section_id: str = "section"

    def __post_init__(self):
        segs = tuple((float(a), float(b)) for a, b in self.segments)
        object.__setattr__(self, "segments", segs)
        if not segs:
            raise DataError("section needs at least one segment")
        if segs[0][0] != 0.0:
            raise DataError(f"first segment must start at the stop line, got {segs[0][0]}")
        for (a, b), (c, _) in zip(segs, segs[1:]):
            if b != c:
                raise DataError(f"segments not contiguous at {b} / {c}")
        for a, b in segs:
            if not b > a:
                raise DataError(f"empty segment ({a}, {b})")
        if self.lanes < 1:
            raise DataError("lanes must be >= 1")
        if not 0 < self.q_max_m <= self.length_m:
            raise DataError(f"q_max_m must lie in (0, length_m], got {self.q_max_m}")

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    @property
    def starts(self) -> np.ndarray:
        return np.array([a for a, _ in self.segments])

    @property
    def ends(self) -> np.ndarray:
        return np.array([b for _, b in self.segments])

    @classmethod
    def uniform(cls, length_m, n_segments, lanes=2, q_max_m=None, section_id="section"):
        edges = np.linspace(0.0, length_m, n_segments + 1)
        segs = tuple(zip(edges[:-1], edges[1:]))
        return cls(
            length_m=float(length_m),
            lanes=lanes,
            segments=segs,
            q_max_m=float(q_max_m if q_max_m is not None else length_m),
            section_id=section_id,
        )


@dataclass(frozen=True)
class SpeedRegimes:
    v_free: float
    v_jam: float

    def __post_init__(self):
        if not 0 < self.v_jam < self.v_free:
            raise DataError(f"need 0 < v_jam < v_free, got v_jam={self.v_jam}, v_free={self.v_free}")


@dataclass(frozen=True)
class SensorDay:
    """One day of aligned sensor data for a single section.

    ``cum_inflow``/``cum_outflow`` and ``ground_truth_m`` are per 10 s step;
    ``afcd_speeds`` is ``(n_segments, n_intervals)`` at 60 s with NaN gaps.
    """

    cum_inflow: np.ndarray
    cum_outflow: np.ndarray
    afcd_speeds: np.ndarray
    t0: datetime = field(default_factory=lambda: datetime(2024, 1, 1, 6, 0))
    ground_truth_m: Optional[np.ndarray] = None
    step_s: int = STEP_S

    def __post_init__(self):
        a = np.asarray(self.cum_inflow, dtype=float)
        d = np.asarray(self.cum_outflow, dtype=float)
        y = np.atleast_2d(np.asarray(self.afcd_speeds, dtype=float))
        if a.shape != d.shape or a.ndim != 1:
            raise AlignmentError("inflow and outflow series must be 1-D and equally long")
        for name, s in (("cum_inflow", a), ("cum_outflow", d)):
            if np.any(s < 0) or np.any(np.diff(s) < 0):
                raise DataError(f"{name} must be non-negative and non-decreasing")
        _check_interval_count(y.shape[1], a.size)
        object.__setattr__(self, "cum_inflow", a)
        object.__setattr__(self, "cum_outflow", d)
        object.__setattr__(self, "afcd_speeds", y)
        if self.ground_truth_m is not None:
            g = np.asarray(self.ground_truth_m, dtype=float)
            if g.shape != a.shape:
                raise AlignmentError("ground truth must share the count grid")
            object.__setattr__(self, "ground_truth_m", g)

    @property
    def n_steps(self) -> int:
        return self.cum_inflow.size

    @property
    def n_segments(self) -> int:
        return self.afcd_speeds.shape[0]

    @property
    def elapsed_s(self) -> np.ndarray:
        return np.arange(self.n_steps, dtype=float) * self.step_s

    @property
    def net_accumulation(self) -> np.ndarray:
        return self.cum_inflow - self.cum_outflow

    def timestamps(self) -> list:
        return [self.t0 + timedelta(seconds=i * self.step_s) for i in range(self.n_steps)]


@dataclass
class FilterTrace:
    """Per-step record of a filter run. ``gains`` is ``(T, n_groups, 3)`` for
    the learned variants and ``(T, n_segments)`` for the EKF."""

    prior_m: np.ndarray
    posterior_m: np.ndarray
    predicted_speeds: np.ndarray
    gains: np.ndarray
    control_m: Optional[np.ndarray] = None
    variance_m2: Optional[np.ndarray] = None


def _check_interval_count(n_intervals, steps):
    if steps > STEPS_PER_INTERVAL * n_intervals:
        raise AlignmentError(
            f"{steps} steps need at least {-(-steps // STEPS_PER_INTERVAL)} aFCD intervals, got {n_intervals}"
        )
    if steps <= STEPS_PER_INTERVAL * (n_intervals - 1):
        raise AlignmentError(
            f"{n_intervals} aFCD intervals exceed {steps} steps by more than one partial interval"
        )


def expand_afcd(afcd, steps: int) -> np.ndarray:
    """Repeat each 60 s value over its six 10 s steps -> ``(n_segments, steps)``."""
    y = np.atleast_2d(np.asarray(afcd, dtype=float))
    _check_interval_count(y.shape[1], steps)
    return np.repeat(y, STEPS_PER_INTERVAL, axis=1)[:, :steps]


def impute_missing(series) -> np.ndarray:
    """Forward-fill NaN gaps per segment; a leading gap takes the first present value."""
    y = np.atleast_2d(np.array(series, dtype=float))
    out = np.empty_like(y)
    for k, row in enumerate(y):
        present = ~np.isnan(row)
        if not present.any():
            raise DataError(f"segment {k} has no observed speeds")
        idx = np.where(present, np.arange(row.size), 0)
        np.maximum.accumulate(idx, out=idx)
        filled = row[idx]
        first = np.argmax(present)
        filled[:first] = row[first]
        out[k] = filled
    return out if np.ndim(series) > 1 else out[0]


def impute_causal(series, fill_value: float) -> np.ndarray:
    """Forward-fill without look-ahead; a leading gap takes ``fill_value``."""
    y = np.atleast_2d(np.array(series, dtype=float))
    out = np.empty_like(y)
    for k, row in enumerate(y):
        last = fill_value
        for j, v in enumerate(row):
            if not np.isnan(v):
                last = v
            out[k, j] = last
    return out if np.ndim(series) > 1 else out[0]


def clamp_queue(x, q_max):
    return np.minimum(np.maximum(x, 0.0), q_max)


def peak_mask(day: SensorDay, start: str, end: str) -> np.ndarray:
    """Boolean mask of steps whose wall-clock time lies in ``[start, end)``."""
    h0, m0 = (int(v) for v in start.split(":"))
    h1, m1 = (int(v) for v in end.split(":"))
    base = day.t0.hour * 3600 + day.t0.minute * 60 + day.t0.second
    tod = base + day.elapsed_s
    return (tod >= h0 * 3600 + m0 * 60) & (tod < h1 * 3600 + m1 * 60)


def stack_days(days: Sequence[SensorDay]):
    """Helper for batching: check equal length and return the shared step count."""
    lengths = {d.n_steps for d in days}
    if len(lengths) != 1:
        raise AlignmentError(f"days have different lengths: {sorted(lengths)}")
    return lengths.pop()
