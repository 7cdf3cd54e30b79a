"""Windowed supervised training of the gain network.

Each epoch starts with a no-grad pass over every training day using the
current parameters; it records the filter state at every window boundary.
Windows are then independent (gradients stop at their first step), so they
are shuffled and processed in minibatches, one optimizer step per batch.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import neural as nn
from .control import DEFAULT_BAND, derive_control
from .domain import SectionGeometry, SensorDay, SpeedRegimes, expand_afcd, impute_missing
from .exceptions import DataError, NumericError, OptimizerError
from .filter import Carry, QNetFilter
from .gainnet import GainNet, GainNetConfig, GainNetState
from .measurement import MeasurementModel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    window_steps: int = 60
    lr: float = 1e-3
    epochs: int = 50
    seed: int = 0
    clamp_in_training: bool = False
    windows_per_batch: int = 8
    patience: int = 10
    max_grad_norm: float = 10.0
    use_control: bool = True
    time_budget_s: Optional[float] = None

    def __post_init__(self):
        if self.window_steps < 1:
            raise ValueError("window_steps must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.windows_per_batch < 1 or self.epochs < 0:
            raise ValueError("windows_per_batch >= 1 and epochs >= 0 required")


@dataclass
class DataSplit:
    train: list
    validation: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def __post_init__(self):
        ids = [id(d) for part in (self.train, self.validation, self.test) for d in part]
        if len(ids) != len(set(ids)):
            raise DataError("train/validation/test splits must be disjoint")

    @classmethod
    def random(cls, days: Sequence, n_validation: int, n_test: int, seed=0):
        order = np.random.default_rng(seed).permutation(len(days))
        pick = [days[i] for i in order]
        return cls(pick[n_validation + n_test:], pick[:n_validation], pick[n_validation:n_validation + n_test])


@dataclass
class PreparedDays:
    """Model inputs for a set of equally long days: ``u (D, T)``, ``y (D, N, T)``, ``truth (D, T)``."""

    u: np.ndarray
    y: np.ndarray
    truth: np.ndarray

    @property
    def n_days(self):
        return self.u.shape[0]

    @property
    def n_steps(self):
        return self.u.shape[1]


def prepare_days(days: Sequence[SensorDay], geometry: SectionGeometry, band=DEFAULT_BAND,
                 use_control=True, need_truth=True) -> PreparedDays:
    if not days:
        raise DataError("no days supplied")
    lengths = {d.n_steps for d in days}
    if len(lengths) != 1:
        raise DataError(f"days have different lengths {sorted(lengths)}")
    u, y, x = [], [], []
    for d in days:
        if d.n_segments != geometry.n_segments:
            raise DataError(f"day has {d.n_segments} segments, section has {geometry.n_segments}")
        if need_truth and d.ground_truth_m is None:
            raise DataError("training days need ground truth")
        u.append(derive_control(d, geometry, band=band).u if use_control else np.zeros(d.n_steps))
        y.append(expand_afcd(impute_missing(d.afcd_speeds), d.n_steps))
        x.append(d.ground_truth_m if d.ground_truth_m is not None else np.full(d.n_steps, np.nan))
    return PreparedDays(np.stack(u), np.stack(y), np.stack(x))


@dataclass
class WindowStarts:
    """Filter state at the first step of every window, indexed ``[day, window]``."""

    x_post: np.ndarray
    d_evol: np.ndarray
    d_update: np.ndarray
    y_prev: np.ndarray  # (D, W, N)
    h_q: np.ndarray  # (D, W, G, H)
    h_sigma: np.ndarray
    h_s: np.ndarray

    def carry(self, days, windows, groups) -> Carry:
        def rows(h):
            sel = h[days, windows]
            return sel.reshape(-1, sel.shape[-1])
        return Carry(self.x_post[days, windows].copy(), self.d_evol[days, windows].copy(),
                     self.d_update[days, windows].copy(),
                     GainNetState(rows(self.h_q), rows(self.h_sigma), rows(self.h_s)),
                     self.y_prev[days, windows].copy())


def window_count(n_steps, window_steps):
    if n_steps < window_steps:
        raise DataError(f"day of {n_steps} steps is shorter than one {window_steps}-step window")
    return n_steps // window_steps


def slice_windows(filt: QNetFilter, data: PreparedDays, window_steps: int) -> WindowStarts:
    """No-grad pass with the current parameters, recording every window's initial state."""
    D, T = data.u.shape
    W = window_count(T, window_steps)
    G = filt.groups
    cfg = filt.net.config
    starts = WindowStarts(
        np.zeros((D, W)), np.zeros((D, W)), np.zeros((D, W)), np.zeros((D, W, data.y.shape[1])),
        np.zeros((D, W, G, cfg.gru_q)), np.zeros((D, W, G, cfg.gru_sigma)), np.zeros((D, W, G, cfg.gru_s)),
    )
    carry = filt.initial_carry(data.y[:, :, 0])
    for t in range(W * window_steps):
        if t % window_steps == 0:
            w = t // window_steps
            starts.x_post[:, w] = carry.x_post
            starts.d_evol[:, w] = carry.d_evol
            starts.d_update[:, w] = carry.d_update
            starts.y_prev[:, w] = carry.y_prev
            starts.h_q[:, w] = carry.gain_state.h_q.reshape(D, G, -1)
            starts.h_sigma[:, w] = carry.gain_state.h_sigma.reshape(D, G, -1)
            starts.h_s[:, w] = carry.gain_state.h_s.reshape(D, G, -1)
        carry, _ = filt.step(None, carry, data.u[:, t], data.y[:, :, t])
    return starts


def window_loss(estimates, truth) -> float:
    est = np.asarray(estimates, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if est.size == 0:
        raise ValueError("empty window")
    if est.shape != truth.shape:
        raise ValueError("estimates and truth differ in length")
    return float(np.sqrt(np.mean((est - truth) ** 2)))


def evaluate_rmse(filt: QNetFilter, data: PreparedDays) -> float:
    """RMSE over every step of every day, clamped inference semantics."""
    clamp = filt.clamp
    filt.clamp = True
    try:
        _, outs = filt.run(data.u, data.y)
    finally:
        filt.clamp = clamp
    est = np.stack([o.x_post for o in outs], axis=1)
    return window_loss(est, data.truth)


@dataclass
class TrainResult:
    net: GainNet
    curves: list  # (epoch, train_rmse, val_rmse)
    best_epoch: int
    best_val_rmse: float
    aborted: Optional[str] = None
    seconds: float = 0.0
    config: dict = field(default_factory=dict)


def _batch_loss(filt, data, starts, days, windows, window_steps, tape):
    carry = starts.carry(days, windows, filt.groups)
    t0 = windows * window_steps
    est = []
    for k in range(window_steps):
        t = t0 + k
        carry, out = filt.step(tape, carry, data.u[days, t], data.y[days, :, t])
        est.append(out.x_post)
    truth = data.truth[days[:, None], t0[:, None] + np.arange(window_steps)]
    return nn.rmse_mean(tape, nn.stack(tape, est), truth)


def train(train_days: Sequence[SensorDay], geometry: SectionGeometry, regimes: SpeedRegimes,
          config: TrainConfig = TrainConfig(), validation_days: Sequence[SensorDay] = (),
          net_config: GainNetConfig = GainNetConfig(), band=DEFAULT_BAND, net: Optional[GainNet] = None,
          on_epoch=None) -> TrainResult:
    """Fit a gain network; the returned net holds the best-validation parameters."""
    t_start = time.perf_counter()
    net = net or GainNet(net_config, seed=config.seed)
    model = MeasurementModel(geometry, regimes)
    filt = QNetFilter(net, model, use_control=config.use_control, clamp=config.clamp_in_training)
    data = prepare_days(train_days, geometry, band, config.use_control)
    val = prepare_days(validation_days, geometry, band, config.use_control) if validation_days else None
    W = window_count(data.n_steps, config.window_steps)
    pairs_day, pairs_win = np.divmod(np.arange(data.n_days * W), W)
    rng = np.random.default_rng(config.seed)

    store = net.store
    best_theta = store.theta.copy()
    best_val, best_epoch, stale = math.inf, 0, 0
    curves, aborted = [], None
    for epoch in range(1, config.epochs + 1):
        starts = slice_windows(filt, data, config.window_steps)
        order = rng.permutation(pairs_day.size)
        losses = []
        try:
            for b in range(0, order.size, config.windows_per_batch):
                pick = order[b:b + config.windows_per_batch]
                tape = nn.Tape()
                loss = _batch_loss(filt, data, starts, pairs_day[pick], pairs_win[pick], config.window_steps, tape)
                if not np.isfinite(loss.value):
                    raise NumericError(f"non-finite training loss in epoch {epoch}")
                store.zero_grad()
                tape.backward(loss)
                grad = store.grad.copy()
                nn.clip_global_norm(grad, config.max_grad_norm)
                nn.adam_step(store, grad, lr=config.lr)
                losses.append(float(loss.value))
        except (NumericError, OptimizerError) as exc:
            aborted = str(exc)
            log.warning("training aborted: %s; restoring epoch %d parameters", exc, best_epoch)
            break
        train_rmse = float(np.mean(losses))
        val_rmse = evaluate_rmse(filt, val) if val is not None else train_rmse
        if not np.isfinite(val_rmse):
            aborted = f"non-finite validation RMSE in epoch {epoch}"
            break
        curves.append((epoch, train_rmse, val_rmse))
        log.info("epoch %d train %.3f val %.3f", epoch, train_rmse, val_rmse)
        if on_epoch is not None:
            on_epoch(epoch, train_rmse, val_rmse)
        if val_rmse < best_val:
            best_val, best_epoch, stale = val_rmse, epoch, 0
            best_theta = store.theta.copy()
        else:
            stale += 1
            if stale >= config.patience:
                break
        if config.time_budget_s is not None and time.perf_counter() - t_start > config.time_budget_s:
            log.info("time budget reached after epoch %d", epoch)
            break
    store.theta[:] = best_theta
    return TrainResult(net, curves, best_epoch, best_val, aborted, time.perf_counter() - t_start, asdict(config))
