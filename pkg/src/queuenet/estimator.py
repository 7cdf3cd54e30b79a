"""scikit-learn style front end: ``fit`` on days with ground truth, ``predict`` queues."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .control import DEFAULT_BAND
from .domain import SectionGeometry, SensorDay, SpeedRegimes
from .exceptions import DataError
from .filter import VARIANTS, EkfParams, run_day
from .gainnet import GainNetConfig
from .io import load_model, save_model
from .measurement import estimate_regimes
from .training import TrainConfig, train


def check_days(X, geometry: SectionGeometry, need_truth=False):
    if isinstance(X, SensorDay):
        X = [X]
    days = list(X)
    if not days:
        raise DataError("no days given")
    for k, d in enumerate(days):
        if not isinstance(d, SensorDay):
            raise TypeError(f"item {k} is {type(d).__name__}, expected SensorDay")
        if d.n_segments != geometry.n_segments:
            raise DataError(f"day {k} has {d.n_segments} segments, section has {geometry.n_segments}")
        if need_truth and d.ground_truth_m is None:
            raise DataError(f"day {k} has no ground truth")
    return days


def regimes_from_days(days) -> SpeedRegimes:
    return estimate_regimes(np.concatenate([d.afcd_speeds.ravel() for d in days]))


class QueueEstimator(BaseEstimator):
    """Queue-length estimator for one road section.

    ``variant`` selects the learned filter with (``qnet``) or without
    (``qnet_no_u``) the count-derived control input, or the analytic
    ``qekf``, which needs no training. ``geometry`` may differ between fit and
    predict (via :meth:`set_params`): the learned gain is shared across
    segment groups.
    """

    def __init__(self, geometry=None, regimes=None, variant="qnet", band=DEFAULT_BAND, mode="offline",
                 gain_config=None, epochs=50, window_steps=60, lr=1e-3, windows_per_batch=8, patience=10,
                 seed=0, ekf=None):
        self.geometry = geometry
        self.regimes = regimes
        self.variant = variant
        self.band = band
        self.mode = mode
        self.gain_config = gain_config
        self.epochs = epochs
        self.window_steps = window_steps
        self.lr = lr
        self.windows_per_batch = windows_per_batch
        self.patience = patience
        self.seed = seed
        self.ekf = ekf

    def _check_params(self):
        if self.geometry is None:
            raise ValueError("geometry is required")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.mode not in ("offline", "online"):
            raise ValueError("mode must be 'offline' or 'online'")

    def fit(self, X, y=None, validation=None):
        """Train on ``X`` (days with ground truth); ``validation`` drives early stopping."""
        self._check_params()
        days = check_days(X, self.geometry, need_truth=self.variant != "qekf")
        self.regimes_ = self.regimes or regimes_from_days(days)
        self.n_segments_in_ = self.geometry.n_segments
        if self.variant == "qekf":
            self.net_, self.curves_ = None, []
            return self
        cfg = TrainConfig(window_steps=self.window_steps, lr=self.lr, epochs=self.epochs, seed=self.seed,
                          windows_per_batch=self.windows_per_batch, patience=self.patience,
                          use_control=self.variant == "qnet")
        val = check_days(validation, self.geometry, need_truth=True) if validation else ()
        result = train(days, self.geometry, self.regimes_, cfg, val,
                       net_config=self.gain_config or GainNetConfig(), band=tuple(self.band))
        self.net_ = result.net
        self.curves_ = result.curves
        self.best_epoch_ = result.best_epoch
        self.train_seconds_ = result.seconds
        return self

    def trace(self, day: SensorDay):
        check_is_fitted(self, "regimes_")
        self._check_params()
        (day,) = check_days([day], self.geometry)
        return run_day(day, self.geometry, self.regimes_, self.variant, net=self.net_,
                       ekf=self.ekf or EkfParams(), mode=self.mode, band=tuple(self.band))

    def predict(self, X):
        """Posterior queue lengths; ``(n_days, n_steps)`` when days share a length."""
        out = [self.trace(d).posterior_m for d in check_days(X, self.geometry)]
        return np.stack(out) if len({o.size for o in out}) == 1 else out

    def score(self, X, y=None):
        """Negative pooled RMSE against each day's ground truth (higher is better)."""
        days = check_days(X, self.geometry, need_truth=True)
        pred = self.predict(days)
        err = np.concatenate([np.asarray(p) - d.ground_truth_m for p, d in zip(pred, days)])
        return -float(np.sqrt(np.mean(err**2)))

    def save(self, path):
        check_is_fitted(self, "net_")
        if self.net_ is None:
            raise ValueError("the analytic variant has nothing to save")
        save_model(path, self.net_, variant=self.variant, band=list(self.band),
                   regimes={"v_free": self.regimes_.v_free, "v_jam": self.regimes_.v_jam},
                   train_segments=self.n_segments_in_)

    @classmethod
    def load(cls, path, geometry: SectionGeometry, **params):
        net, extra = load_model(path)
        est = cls(geometry=geometry, variant=extra.get("variant", "qnet"),
                  band=tuple(extra.get("band", DEFAULT_BAND)), gain_config=net.config, **params)
        reg = extra.get("regimes")
        est.regimes_ = params.get("regimes") or (SpeedRegimes(**reg) if reg else None)
        est.net_ = net
        est.curves_ = []
        est.n_segments_in_ = extra.get("train_segments")
        return est
