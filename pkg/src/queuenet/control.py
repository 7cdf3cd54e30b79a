"""Control input (queue change per step) from cumulative loop counts.

The chain is: subtract the unobserved net flow ``lambda_c * t`` from the net
accumulation ``A - D``, rescale to ``[0, q_max]``, band-pass in the Fourier
domain, then take first differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .domain import STEP_S, SectionGeometry, SensorDay
from .exceptions import DataError, EstimationError

DEFAULT_BAND = (1.0 / (4 * 3600), 1.0 / (4 * 60))
DEFAULT_BOUNDARY_STEPS = 180
DEFAULT_K_JAM = 1.0 / 7.5


@dataclass(frozen=True)
class ReconstructionParams:
    lambda_c: float = 0.0
    k_jam: float = DEFAULT_K_JAM
    k_free: float = 0.0
    bandpass: tuple = DEFAULT_BAND

    def __post_init__(self):
        if not self.k_jam > self.k_free >= 0:
            raise DataError(f"need k_jam > k_free >= 0, got {self.k_jam}, {self.k_free}")
        lo, hi = self.bandpass
        if not 0 <= lo < hi <= 0.5 / STEP_S:
            raise DataError(f"band ({lo}, {hi}) must satisfy 0 <= low < high <= {0.5 / STEP_S}")


@dataclass
class ControlSeries:
    u: np.ndarray
    reconstructed_q: np.ndarray
    lambda_c: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _net_and_time(counts, step_s=STEP_S):
    if isinstance(counts, SensorDay):
        return counts.net_accumulation, counts.elapsed_s
    net = np.asarray(counts, dtype=float)
    return net, np.arange(net.size, dtype=float) * step_s


def reconstruct_queue_raw(counts, params: ReconstructionParams, geometry: SectionGeometry) -> np.ndarray:
    """Invert the conservation balance for the queue length; no clamping."""
    net, t = _net_and_time(counts)
    m, L = geometry.lanes, geometry.length_m
    return (net - m * L * params.k_free - params.lambda_c * t) / (m * (params.k_jam - params.k_free))


def _slope(t, y):
    tc = t - t.mean()
    denom = np.dot(tc, tc)
    if denom == 0:
        raise EstimationError("degenerate regression support: all samples at one time")
    return float(np.dot(tc, y - y.mean()) / denom)


def estimate_lambda_offline(counts, boundary_window_steps=DEFAULT_BOUNDARY_STEPS, step_s=STEP_S) -> float:
    """Slope of ``A - D`` against elapsed seconds over the first and last windows.

    Both windows are assumed to carry a near-empty queue, so the only trend
    left in the net accumulation is the unobserved net outflow.
    """
    net, t = _net_and_time(counts, step_s)
    n, w = net.size, boundary_window_steps
    idx = np.unique(np.concatenate([np.arange(min(w, n)), np.arange(max(n - w, 0), n)]))
    return _slope(t[idx], net[idx])


class RunningSlope:
    """Welford-style streaming least-squares slope."""

    def __init__(self):
        self.n = 0
        self.mean_t = 0.0
        self.mean_y = 0.0
        self.c_ty = 0.0
        self.m2_t = 0.0

    def push(self, t, y):
        self.n += 1
        dt = t - self.mean_t
        self.mean_t += dt / self.n
        self.mean_y += (y - self.mean_y) / self.n
        self.c_ty += dt * (y - self.mean_y)
        self.m2_t += dt * (t - self.mean_t)

    @property
    def slope(self) -> float:
        return self.c_ty / self.m2_t if self.m2_t > 0 else 0.0


def estimate_lambda_online(counts, boundary_window_steps=DEFAULT_BOUNDARY_STEPS, step_s=STEP_S) -> np.ndarray:
    """Causal per-step unobserved-rate estimate; 0 until one window is filled."""
    net, t = _net_and_time(counts, step_s)
    reg = RunningSlope()
    out = np.zeros(net.size)
    for k in range(net.size):
        reg.push(t[k], net[k])
        if k + 1 >= boundary_window_steps:
            out[k] = reg.slope
    return out


def affine_rescale(signal, q_max: float) -> np.ndarray:
    s = np.asarray(signal, dtype=float)
    lo, hi = s.min(), s.max()
    if hi == lo:
        raise EstimationError("cannot rescale a constant signal")
    return (s - lo) * (q_max / (hi - lo))


def bandpass_filter(signal, low_hz: float, high_hz: float, step_s=STEP_S) -> np.ndarray:
    """Zero every Fourier bin outside ``[low_hz, high_hz]``."""
    s = np.asarray(signal, dtype=float)
    if s.size < 16:
        raise DataError("band-pass needs at least 16 samples")
    spectrum = np.fft.rfft(s)
    f = np.fft.rfftfreq(s.size, d=step_s)
    spectrum[(f < low_hz) | (f > high_hz)] = 0.0
    return np.fft.irfft(spectrum, n=s.size)


def _difference(q):
    u = np.zeros_like(q)
    u[1:] = np.diff(q)
    return u


class OnlineControl:
    """Streaming control-input derivation that never looks ahead.

    At step ``t`` the unobserved rate is refit on all counts so far, the
    corrected prefix is rescaled with its running extrema and band-passed with
    a mirror extension, and the filtered end value is differenced against the
    previous step's end value. The running range is floored at the vehicle
    count of a full queue so that early-day scales stay physical.
    """

    def __init__(self, geometry: SectionGeometry, band=DEFAULT_BAND,
                 boundary_window_steps=DEFAULT_BOUNDARY_STEPS, k_jam=DEFAULT_K_JAM, step_s=STEP_S):
        self.q_max = geometry.q_max_m
        self.min_range = geometry.q_max_m * geometry.lanes * k_jam
        self.band = band
        self.window = boundary_window_steps
        self.step_s = step_s
        self._net = []
        self._reg = RunningSlope()
        self._last = 0.0

    def push(self, cum_inflow: float, cum_outflow: float):
        """Consume one 10 s count row; return ``(u_t, q_t, lambda_t)``."""
        k = len(self._net)
        net_k = float(cum_inflow) - float(cum_outflow)
        self._net.append(net_k)
        self._reg.push(k * self.step_s, net_k)
        lam = self._reg.slope if k + 1 >= self.window else 0.0
        net = np.asarray(self._net)
        s = net - lam * (np.arange(k + 1) * self.step_s)
        lo = s.min()
        scale = self.q_max / max(s.max() - lo, self.min_range)
        scaled = (s - lo) * scale
        if k + 1 >= 8:
            mirrored = np.concatenate([scaled, scaled[::-1]])
            q = float(bandpass_filter(mirrored, *self.band, step_s=self.step_s)[k])
        else:
            q = 0.0
        u = 0.0 if k == 0 else q - self._last
        self._last = q
        return u, q, lam


def derive_control(day: SensorDay, geometry: SectionGeometry, mode="offline", band=DEFAULT_BAND,
                   boundary_window_steps=DEFAULT_BOUNDARY_STEPS, lambda_c: Optional[float] = None,
                   k_jam=DEFAULT_K_JAM) -> ControlSeries:
    """Control input for one day.

    ``mode="offline"`` uses the whole day (boundary-window rate, day extrema);
    ``mode="online"`` replays :class:`OnlineControl` step by step.
    """
    if mode == "online":
        ctl = OnlineControl(geometry, band, boundary_window_steps, k_jam, day.step_s)
        rows = [ctl.push(a, d) for a, d in zip(day.cum_inflow, day.cum_outflow)]
        u, q, lam = (np.array(col) for col in zip(*rows))
        return ControlSeries(u=u, reconstructed_q=q, lambda_c=lam)
    if mode != "offline":
        raise ValueError(f"unknown mode {mode!r}")
    net, t = day.net_accumulation, day.elapsed_s
    lam = estimate_lambda_offline(day, boundary_window_steps, day.step_s) if lambda_c is None else lambda_c
    s = net - lam * t
    if s.max() == s.min():
        q = np.zeros_like(s)
    else:
        q = bandpass_filter(affine_rescale(s, geometry.q_max_m), *band, step_s=day.step_s)
    return ControlSeries(u=_difference(q), reconstructed_q=q, lambda_c=np.full(s.size, lam))


class ControlInputTransformer(BaseEstimator, TransformerMixin):
    """Maps a list of :class:`SensorDay` to a ``(n_days, n_steps)`` control array."""

    def __init__(self, geometry=None, mode="offline", band=DEFAULT_BAND,
                 boundary_window_steps=DEFAULT_BOUNDARY_STEPS):
        self.geometry = geometry
        self.mode = mode
        self.band = band
        self.boundary_window_steps = boundary_window_steps

    def fit(self, X, y=None):
        if self.geometry is None:
            raise ValueError("ControlInputTransformer needs a geometry")
        self.n_days_seen_ = len(X)
        return self

    def transform(self, X):
        return np.stack([
            derive_control(d, self.geometry, self.mode, tuple(self.band), self.boundary_window_steps).u
            for d in X
        ])


def windowed_tracking_rmse(u, truth, window_steps=60, q_max=None) -> float:
    """RMSE of integrating ``u`` from the true queue at each window start."""
    u = np.asarray(u, dtype=float)
    truth = np.asarray(truth, dtype=float)
    cap = np.inf if q_max is None else q_max
    errs = []
    for a in range(0, truth.size - window_steps + 1, window_steps):
        x = truth[a]
        for t in range(a + 1, a + window_steps):
            x = min(max(x + u[t], 0.0), cap)
            errs.append(x - truth[t])
    return float(np.sqrt(np.mean(np.square(errs))))


def select_band(days, geometry: SectionGeometry, low_periods_h=(2, 4, 8, 12, 24), high_hz=DEFAULT_BAND[1],
                window_steps=60):
    """Choose the low cutoff that best tracks the ground truth on ``days``.

    This automates the usual visual check of filtered reconstructions; pass
    training days only.
    """
    scores = {}
    for hours in low_periods_h:
        band = (1.0 / (hours * 3600.0), high_hz)
        scores[hours] = float(np.mean([
            windowed_tracking_rmse(derive_control(d, geometry, band=band).u, d.ground_truth_m,
                                   window_steps, geometry.q_max_m)
            for d in days
        ]))
    best = min(scores, key=lambda h: (scores[h], h))
    return (1.0 / (best * 3600.0), high_hz), scores
