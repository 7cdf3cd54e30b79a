"""Predict/update recursion for the three estimator variants.

``qnet``       learned grouped gain, control input from loop counts
``qnet_no_u``  learned grouped gain, queue assumed constant between steps
``qekf``       analytic extended Kalman filter on the same state-space model
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import neural as nn
from .control import DEFAULT_BAND, OnlineControl, derive_control
from .domain import (STEPS_PER_INTERVAL, FilterTrace, SectionGeometry, SensorDay, SpeedRegimes,
                     clamp_queue, expand_afcd, impute_causal, impute_missing)
from .exceptions import NumericError
from .gainnet import GainFeatures, GainNet, GainNetState, group_index
from .measurement import MeasurementModel

VARIANTS = ("qnet", "qnet_no_u", "qekf")


@dataclass(frozen=True)
class EkfParams:
    process_var: float = 2.0**2
    meas_var: float = 1.0**2
    initial_var: float = 10.0**2

    def __post_init__(self):
        if min(self.process_var, self.meas_var, self.initial_var) <= 0:
            raise ValueError("EKF variances must be positive")


def predict(x_post_prev, u_t, q_max, model: MeasurementModel):
    x_prior = clamp_queue(x_post_prev + u_t, q_max)
    return x_prior, model.expected_speeds(x_prior)


def update_ekf(x_prior, sigma_prior, y_t, y_prior, model, params: EkfParams, q_max, clamp=True):
    """Scalar-state EKF correction; returns ``(x_post, sigma_post, gain_row)``."""
    H = np.atleast_1d(model.jacobian(x_prior))
    S = sigma_prior * np.outer(H, H) + params.meas_var * np.eye(H.size)
    try:
        s_inv_h = np.linalg.solve(S, H)
    except np.linalg.LinAlgError as exc:
        raise NumericError("innovation covariance is singular") from exc
    gain = sigma_prior * s_inv_h
    if not np.all(np.isfinite(gain)):
        raise NumericError("non-finite EKF gain")
    x_post = x_prior + float(gain @ (np.asarray(y_t) - y_prior))
    if clamp:
        x_post = float(clamp_queue(x_post, q_max))
    sigma_post = sigma_prior - float(gain @ S @ gain)
    return x_post, sigma_post, gain


def ekf_step(x_post, sigma_post, u_t, y_t, model, params: EkfParams, q_max, clamp=True):
    x_prior = x_post + u_t
    if clamp:
        x_prior = float(clamp_queue(x_prior, q_max))
    sigma_prior = sigma_post + params.process_var
    y_prior = model.expected_speeds(x_prior)
    x_new, sigma_new, gain = update_ekf(x_prior, sigma_prior, y_t, y_prior, model, params, q_max, clamp)
    return x_prior, y_prior, x_new, sigma_new, gain


@dataclass
class Carry:
    """Recursive state of a batch of ``S`` Q-Net sequences."""

    x_post: object  # (S,)
    d_evol: object  # (S,) x_post[t-1] - x_post[t-2]
    d_update: object  # (S,) x_post[t-1] - x_prior[t-1]
    gain_state: GainNetState
    y_prev: np.ndarray  # (S, N)

    def detached(self):
        return Carry(np.array(nn.val(self.x_post)), np.array(nn.val(self.d_evol)),
                     np.array(nn.val(self.d_update)), self.gain_state.detached(), self.y_prev.copy())


@dataclass
class StepOutput:
    x_prior: object
    y_prior: np.ndarray
    gain: np.ndarray  # (S, G, 3) physical gains
    x_post: object


class QNetFilter:
    """One predict/update step for ``S`` parallel sequences on one section.

    Queue differences enter the network divided by ``q_max`` and speeds
    divided by ``v_free``; the raw network output is rescaled by
    ``output_scale * q_max / v_free`` into meters per (m/s).
    """

    def __init__(self, net: GainNet, model: MeasurementModel, use_control=True, clamp=True):
        self.net = net
        self.model = model
        self.use_control = use_control
        self.clamp = clamp
        self.index = group_index(model.n_segments)
        self.groups = self.index.shape[0]
        self.q_max = model.geometry.q_max_m
        self.v_free = model.regimes.v_free
        self.out_scale = net.config.output_scale
        self.gain_scale = self.out_scale * self.q_max / self.v_free

    def initial_carry(self, y0) -> Carry:
        y0 = np.atleast_2d(y0)
        S = y0.shape[0]
        return Carry(np.zeros(S), np.zeros(S), np.zeros(S), self.net.initial_state(S * self.groups), y0.copy())

    def step(self, tape, carry: Carry, u_t, y_t):
        q_max, G = self.q_max, self.groups
        x_prior = nn.add(tape, carry.x_post, u_t) if self.use_control else carry.x_post
        if self.clamp:
            x_prior = nn.clip(tape, x_prior, 0.0, q_max)
        y_prior = nn.measure(tape, self.model, x_prior)
        innov = nn.sub(tape, y_t, y_prior)
        innov_g = nn.scale(tape, nn.gather_groups(tape, innov, self.index), 1.0 / self.v_free)
        meas_g = (y_t - carry.y_prev)[:, self.index].reshape(-1, 3) / self.v_free
        feats = GainFeatures(
            d_update=nn.repeat_rows(tape, nn.scale(tape, carry.d_update, 1.0 / q_max), G),
            d_evol=nn.repeat_rows(tape, nn.scale(tape, carry.d_evol, 1.0 / q_max), G),
            d_meas=meas_g,
            d_innov=innov_g,
        )
        gain, gain_state = self.net.forward(tape, feats, carry.gain_state)
        corr = nn.scale(tape, nn.group_dot_sum(tape, gain, innov_g, G), q_max * self.out_scale)
        x_post = nn.add(tape, x_prior, corr)
        if self.clamp:
            x_post = nn.clip(tape, x_post, 0.0, q_max)
        new = Carry(
            x_post=x_post,
            d_evol=nn.sub(tape, x_post, carry.x_post),
            d_update=nn.sub(tape, x_post, x_prior),
            gain_state=gain_state,
            y_prev=np.array(y_t, dtype=float),
        )
        gains = nn.val(gain).reshape(-1, G, 3) * self.gain_scale
        return new, StepOutput(x_prior, nn.val(y_prior), gains, x_post)

    def run(self, u, y, carry: Optional[Carry] = None, tape=None):
        """Run over ``T`` steps. ``u`` is ``(S, T)``, ``y`` is ``(S, N, T)``.

        Returns ``(carry, outputs)``.
        """
        u = np.atleast_2d(u)
        y = y if y.ndim == 3 else y[None]
        if carry is None:
            carry = self.initial_carry(y[:, :, 0])
        outs = []
        for t in range(u.shape[1]):
            carry, out = self.step(tape, carry, u[:, t], y[:, :, t])
            outs.append(out)
        return carry, outs


def _speeds_for(day: SensorDay, regimes: SpeedRegimes, causal: bool):
    raw = day.afcd_speeds
    filled = impute_causal(raw, regimes.v_free) if causal else impute_missing(raw)
    return expand_afcd(filled, day.n_steps)


def _control_for(day, geometry, variant, mode, band, control):
    if variant == "qnet_no_u":
        return np.zeros(day.n_steps)
    if control is not None:
        return np.asarray(control, dtype=float)
    return derive_control(day, geometry, mode=mode, band=band).u


def run_ekf(u, y, model, params: EkfParams, q_max, clamp=True):
    T = u.size
    prior, post = np.zeros(T), np.zeros(T)
    var = np.zeros(T)
    preds = np.zeros((T, model.n_segments))
    gains = np.zeros((T, model.n_segments))
    x, sigma = 0.0, params.initial_var - params.process_var
    for t in range(T):
        try:
            prior[t], preds[t], x, sigma, gains[t] = ekf_step(x, sigma, u[t], y[:, t], model, params, q_max, clamp)
        except NumericError as exc:
            exc.trace = FilterTrace(prior[:t], post[:t], preds[:t], gains[:t], u[:t], var[:t])
            raise
        post[t], var[t] = x, sigma
    return FilterTrace(prior, post, preds, gains, u, var)


def run_day(day: SensorDay, geometry: SectionGeometry, regimes: SpeedRegimes, variant="qnet",
            net: Optional[GainNet] = None, ekf: Optional[EkfParams] = None, mode="offline",
            band=DEFAULT_BAND, control=None) -> FilterTrace:
    """Filter one day from ``x = 0`` and return the full trace.

    In ``mode="online"`` both the control input and the aFCD gap filling are
    causal, so the result equals feeding the day through :class:`StreamingEstimator`.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    model = MeasurementModel(geometry, regimes)
    y = _speeds_for(day, regimes, causal=mode == "online")
    u = _control_for(day, geometry, variant, mode, band, control)
    if variant == "qekf":
        return run_ekf(u, y, model, ekf or EkfParams(), geometry.q_max_m)
    if net is None:
        raise ValueError(f"variant {variant!r} needs a trained GainNet")
    filt = QNetFilter(net, model, use_control=variant == "qnet", clamp=True)
    carry = filt.initial_carry(y[None, :, 0])
    prior, post = np.zeros(day.n_steps), np.zeros(day.n_steps)
    preds = np.zeros((day.n_steps, model.n_segments))
    gains = np.zeros((day.n_steps, filt.groups, 3))
    for t in range(day.n_steps):
        try:
            carry, out = filt.step(None, carry, u[None, t], y[None, :, t])
        except NumericError as exc:
            exc.trace = FilterTrace(prior[:t], post[:t], preds[:t], gains[:t], u[:t])
            raise
        prior[t], post[t] = out.x_prior[0], out.x_post[0]
        preds[t], gains[t] = out.y_prior[0], out.gain[0]
    return FilterTrace(prior, post, preds, gains, u)


class StreamingEstimator:
    """Consumes one 10 s row at a time and never reads ahead.

    ``push`` takes the cumulative counts for the step and, at the start of a
    60 s interval, that interval's aFCD speed vector (NaN for gaps). Missing
    speeds carry the last observation forward, or ``v_free`` before any.
    """

    def __init__(self, geometry: SectionGeometry, regimes: SpeedRegimes, variant="qnet",
                 net: Optional[GainNet] = None, ekf: Optional[EkfParams] = None, band=DEFAULT_BAND):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        self.variant = variant
        self.model = MeasurementModel(geometry, regimes)
        self.q_max = geometry.q_max_m
        self.control = OnlineControl(geometry, band)
        self.ekf = ekf or EkfParams()
        self._last_speed = np.full(geometry.n_segments, regimes.v_free)
        self._y = None
        self._t = 0
        if variant != "qekf":
            if net is None:
                raise ValueError("learned variants need a GainNet")
            self.filter = QNetFilter(net, self.model, use_control=variant == "qnet", clamp=True)
            self.carry = None
        else:
            self.x, self.sigma = 0.0, self.ekf.initial_var - self.ekf.process_var

    def push(self, cum_inflow, cum_outflow, speeds=None):
        """Return ``(prior_m, posterior_m)`` for this step."""
        if self._t % STEPS_PER_INTERVAL == 0:
            if speeds is not None:
                s = np.asarray(speeds, dtype=float)
                self._last_speed = np.where(np.isnan(s), self._last_speed, s)
            self._y = self._last_speed.copy()
        u = self.control.push(cum_inflow, cum_outflow)[0]
        if self.variant == "qnet_no_u":
            u = 0.0
        self._t += 1
        if self.variant == "qekf":
            prior, _, self.x, self.sigma, _ = ekf_step(self.x, self.sigma, u, self._y, self.model, self.ekf, self.q_max)
            return float(prior), float(self.x)
        y = self._y[None, :]
        if self.carry is None:
            self.carry = self.filter.initial_carry(y)
        self.carry, out = self.filter.step(None, self.carry, np.array([u]), y)
        return float(out.x_prior[0]), float(out.x_post[0])
