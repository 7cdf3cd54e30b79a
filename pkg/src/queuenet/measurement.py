"""Two-regime speed model: queue length -> expected per-segment aFCD speeds."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .domain import SectionGeometry, SpeedRegimes
from .exceptions import RegimeEstimationError


def expected_speed(x: float, segment, regimes: SpeedRegimes) -> float:
    """Space-mean speed over ``segment = (l, r)`` when the queue reaches ``x``.

    The queued part ``(l, x]`` is crossed at jam speed and the rest at
    free-flow speed; the result is segment length over total travel time.
    """
    l, r = segment
    if x <= l:
        return regimes.v_free
    if x > r:
        return regimes.v_jam
    return (r - l) / ((x - l) / regimes.v_jam + (r - x) / regimes.v_free)


@dataclass(frozen=True)
class MeasurementModel:
    geometry: SectionGeometry
    regimes: SpeedRegimes

    @property
    def n_segments(self) -> int:
        return self.geometry.n_segments

    def expected_speeds(self, x) -> np.ndarray:
        """Vectorized map; scalar ``x`` -> ``(N,)``, ``(S,)`` -> ``(S, N)``."""
        x = np.asarray(x, dtype=float)
        l, r = self.geometry.starts, self.geometry.ends
        vj, vf = self.regimes.v_jam, self.regimes.v_free
        xe = x[..., None]
        travel = (xe - l) / vj + (r - xe) / vf
        with np.errstate(divide="ignore", invalid="ignore"):
            partial = (r - l) / travel
        return np.where(xe <= l, vf, np.where(xe > r, vj, partial))

    def jacobian(self, x) -> np.ndarray:
        """d speed / d x per segment.

        Nonzero on ``[l, r)``: at ``x == l`` the right-limit of the partial
        branch is reported, at ``x == r`` the (zero) right limit.
        """
        x = np.asarray(x, dtype=float)
        l, r = self.geometry.starts, self.geometry.ends
        vj, vf = self.regimes.v_jam, self.regimes.v_free
        xe = x[..., None]
        travel = (xe - l) / vj + (r - xe) / vf
        inside = (xe >= l) & (xe < r)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = -(r - l) * (1.0 / vj - 1.0 / vf) / travel**2
        return np.where(inside, d, 0.0)


def expected_speeds(x, model: MeasurementModel) -> np.ndarray:
    return model.expected_speeds(x)


def jacobian_h(x, model: MeasurementModel) -> np.ndarray:
    return model.jacobian(x)


def speed_histogram(sample, bin_width=1.0):
    s = np.asarray(sample, dtype=float)
    s = s[np.isfinite(s)]
    lo = np.floor(s.min() / bin_width) * bin_width
    hi = np.floor(s.max() / bin_width) * bin_width + bin_width
    edges = np.arange(lo, hi + 0.5 * bin_width, bin_width)
    if edges.size < 2:
        edges = np.array([lo, lo + bin_width])
    counts, edges = np.histogram(s, bins=edges)
    return counts, edges


def _local_maxima(counts):
    # plateaus count once, at their left edge
    padded = np.concatenate([[-1], counts, [-1]])
    peaks = []
    i = 1
    while i <= counts.size:
        j = i
        while j < counts.size and padded[j + 1] == padded[i]:
            j += 1
        if padded[i] > padded[i - 1] and padded[i] > padded[j + 1] and padded[i] > 0:
            peaks.append(i - 1)
        i = j + 1
    return peaks


def estimate_regimes(
    sample, bin_width=1.0, min_separation=3.0, histogram_path=None
) -> SpeedRegimes:
    """Pick jam and free-flow speeds from the two dominant histogram modes.

    The dominant pair is the tallest local maximum plus the tallest other
    maximum at least ``min_separation`` away. Each mode is refined to the
    count-weighted centroid of its bin and the two neighbours.
    """
    s = np.asarray(sample, dtype=float).ravel()
    s = s[np.isfinite(s)]
    if s.size < 100:
        raise RegimeEstimationError(f"need at least 100 speed samples, got {s.size}")
    counts, edges = speed_histogram(s, bin_width)
    centers = 0.5 * (edges[:-1] + edges[1:])
    if histogram_path is not None:
        write_histogram(histogram_path, counts, edges)
    peaks = sorted(_local_maxima(counts), key=lambda k: (-counts[k], k))
    if peaks:
        first = peaks[0]
        for other in peaks[1:]:
            if abs(centers[other] - centers[first]) >= min_separation:
                lo_k, hi_k = sorted((first, other))
                return SpeedRegimes(
                    v_free=_centroid(counts, centers, hi_k), v_jam=_centroid(counts, centers, lo_k)
                )
    table = "\n".join(f"  [{a:6.2f}, {b:6.2f}) {c}" for a, b, c in zip(edges[:-1], edges[1:], counts))
    raise RegimeEstimationError(
        f"speed distribution is not bimodal (separation >= {min_separation} m/s):\n{table}",
        histogram=(counts, edges),
    )


def _centroid(counts, centers, k):
    lo, hi = max(k - 1, 0), min(k + 2, counts.size)
    w = counts[lo:hi].astype(float)
    return float(np.dot(w, centers[lo:hi]) / w.sum())


def write_histogram(path, counts, edges):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_start_mps", "bin_end_mps", "count"])
        for a, b, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([f"{a:g}", f"{b:g}", int(c)])


class SpeedRegimeEstimator(BaseEstimator):
    """Estimator wrapper around :func:`estimate_regimes`.

    ``fit`` accepts any array of speeds (NaN entries are ignored) and stores
    ``v_free_`` / ``v_jam_``.
    """

    def __init__(self, bin_width=1.0, min_separation=3.0):
        self.bin_width = bin_width
        self.min_separation = min_separation

    def fit(self, X, y=None):
        regimes = estimate_regimes(X, self.bin_width, self.min_separation)
        self.v_free_ = regimes.v_free
        self.v_jam_ = regimes.v_jam
        self.counts_, self.edges_ = speed_histogram(np.asarray(X, dtype=float).ravel(), self.bin_width)
        return self

    @property
    def regimes_(self) -> SpeedRegimes:
        check_is_fitted(self, ["v_free_", "v_jam_"])
        return SpeedRegimes(v_free=self.v_free_, v_jam=self.v_jam_)
