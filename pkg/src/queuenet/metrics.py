"""Error metrics, peak-period scopes and onset timing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .domain import STEP_S, SensorDay, peak_mask

MAPE_FLOOR_M = 10.0
DEFAULT_PEAKS = {"morning": ("07:00", "09:00"), "afternoon": ("16:00", "18:00")}


@dataclass(frozen=True)
class ScopeMetrics:
    rmse_m: float
    mae_m: float
    mape_pct: float  # NaN when no truth value exceeds the floor

    def as_dict(self):
        return {"rmse_m": self.rmse_m, "mae_m": self.mae_m, "mape_pct": self.mape_pct}


@dataclass
class MetricsReport:
    """``scopes[method][scope]`` -> :class:`ScopeMetrics`."""

    scopes: dict = field(default_factory=dict)

    def add(self, method, scope, metrics: ScopeMetrics):
        self.scopes.setdefault(method, {})[scope] = metrics

    def get(self, method, scope="all_day") -> ScopeMetrics:
        return self.scopes[method][scope]

    @property
    def methods(self):
        return list(self.scopes)

    def rows(self):
        for method, by_scope in self.scopes.items():
            for scope, m in by_scope.items():
                yield method, scope, m

    def table(self) -> str:
        lines = [f"{'method':<12} {'scope':<10} {'RMSE':>9} {'MAE':>9} {'MAPE%':>9}"]
        for method, scope, m in self.rows():
            lines.append(f"{method:<12} {scope:<10} {m.rmse_m:9.2f} {m.mae_m:9.2f} {format_mape(m.mape_pct):>9}")
        return "\n".join(lines)


def format_mape(value) -> str:
    return "undefined" if math.isnan(value) else f"{value:.2f}"


def scope_metrics(truth, estimate) -> ScopeMetrics:
    truth = np.asarray(truth, dtype=float)
    estimate = np.asarray(estimate, dtype=float)
    if truth.shape != estimate.shape:
        raise ValueError(f"truth {truth.shape} and estimate {estimate.shape} are not aligned")
    if truth.size == 0:
        return ScopeMetrics(math.nan, math.nan, math.nan)
    err = estimate - truth
    support = truth > MAPE_FLOOR_M
    mape = 100.0 * float(np.mean(np.abs(err[support]) / truth[support])) if support.any() else math.nan
    return ScopeMetrics(float(np.sqrt(np.mean(err**2))), float(np.mean(np.abs(err))), mape)


def compute_metrics(truth, estimates: dict, peaks: dict = None, day: SensorDay = None,
                    masks: dict = None) -> MetricsReport:
    """Metrics per method for the whole series and each peak scope.

    Peak scopes come from ``masks`` (name -> boolean array) or are derived
    from ``peaks`` (name -> (start, end) clock times) using ``day``'s clock.
    """
    truth = np.asarray(truth, dtype=float)
    if masks is None:
        masks = {}
        if day is not None:
            for name, (a, b) in (peaks or DEFAULT_PEAKS).items():
                masks[name] = peak_mask(day, a, b)
    report = MetricsReport()
    for method, est in estimates.items():
        est = np.asarray(est, dtype=float)
        report.add(method, "all_day", scope_metrics(truth, est))
        for name, mask in masks.items():
            report.add(method, name, scope_metrics(truth[mask], est[mask]))
    return report


def improvement(baseline: float, method: float) -> float:
    if baseline == 0:
        raise ZeroDivisionError("baseline metric is zero; improvement undefined")
    return 100.0 * (baseline - method) / baseline


def first_crossing(series, threshold, start=0):
    """Index of the first step at or after ``start`` where ``series >= threshold``; None if never."""
    hits = np.flatnonzero(np.asarray(series)[start:] >= threshold)
    return int(hits[0]) + start if hits.size else None


def sustained_crossing(series, threshold, dwell_steps=30):
    """First step at or above ``threshold`` whose next ``dwell_steps`` average is too.

    With ``dwell_steps=1`` this is the plain first crossing. Longer dwells
    ignore single-cycle spikes and isolated false alarms.
    """
    s = np.asarray(series, dtype=float)
    if dwell_steps <= 1:
        return first_crossing(s, threshold)
    csum = np.concatenate([[0.0], np.cumsum(s)])
    idx = np.arange(s.size)
    end = np.minimum(idx + dwell_steps, s.size)
    ahead = (csum[end] - csum[idx]) / (end - idx)
    hits = np.flatnonzero((s >= threshold) & (ahead >= threshold))
    return int(hits[0]) if hits.size else None


def onset_lag_s(truth, estimate, threshold=50.0, dwell_steps=30, step_s=STEP_S):
    """Seconds from the truth's queue onset to the estimate's (negative = early).

    Returns None when the truth never reaches ``threshold`` and ``inf`` when
    the estimate never does.
    """
    t0 = sustained_crossing(truth, threshold, dwell_steps)
    if t0 is None:
        return None
    t1 = sustained_crossing(estimate, threshold, dwell_steps)
    if t1 is None:
        return math.inf
    return (t1 - t0) * step_s
