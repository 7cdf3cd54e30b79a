"""Synthetic signalized-approach days with known ground truth.

The queue is a vertical point queue advanced in 1 s ticks: Poisson arrivals
join it (or pass straight through on green when capacity allows) and it
discharges at the saturation flow while the signal is green. Vehicles that
cannot fit within ``q_max`` wait upstream of the entry detector, so the
counts stay consistent with the stored queue. Unobserved exits (``lambda_c``
> 0) are vehicles counted at the entry that leave through a side access
before reaching the stop line; ``lambda_c`` < 0 models uncounted entries.

aFCD speeds are the interval-mean queue pushed through the two-regime speed
model, shifted by the reporting delay, perturbed and then randomly dropped.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime

import numpy as np

from .domain import (AFCD_INTERVAL_S, DAY_STEPS, STEP_S, SectionGeometry, SensorDay,
                     SpeedRegimes)
from .measurement import MeasurementModel

JAM_SPACING_M = 7.5


def default_geometry():
    return SectionGeometry.uniform(600.0, 5, lanes=2, q_max_m=600.0, section_id="sim-5")


@dataclass(frozen=True)
class ScenarioConfig:
    geometry: SectionGeometry = field(default_factory=default_geometry)
    regimes: SpeedRegimes = SpeedRegimes(v_free=13.9, v_jam=2.0)
    n_steps: int = DAY_STEPS
    start: datetime = datetime(2024, 1, 1, 6, 0)
    cycle_s: int = 60
    green_s: int = 30
    saturation_vps_per_lane: float = 0.5
    base_demand_vph: float = 500.0
    peak_demand_vph: float = 1800.0
    peak_centers_h: tuple = (8.0, 17.0)
    peak_width_min: float = 35.0
    peak_jitter_min: float = 15.0
    amplitude_spread: float = 0.15
    lambda_c: float = 0.08
    exit_process: str = "regular"
    afcd_delay_s: int = 60
    noise_std: float = 2.5
    missing_prob: float = 0.1

    def __post_init__(self):
        if self.cycle_s < 1 or not 0 <= self.green_s <= self.cycle_s:
            raise ValueError("need cycle_s >= 1 and 0 <= green_s <= cycle_s (0 = always red)")
        if self.exit_process not in ("regular", "poisson"):
            raise ValueError("exit_process must be 'regular' or 'poisson'")
        if self.afcd_delay_s % AFCD_INTERVAL_S:
            raise ValueError("afcd_delay_s must be a multiple of 60 s")
        if not 0 <= self.missing_prob < 1 or self.noise_std < 0:
            raise ValueError("invalid noise or missing-data settings")

    def clean(self):
        """Same traffic with a perfect aFCD feed: no noise, delay or gaps."""
        return replace(self, afcd_delay_s=0, noise_std=0.0, missing_prob=0.0)


@dataclass
class SimOutput:
    day: SensorDay
    queue_per_second_m: np.ndarray
    unobserved_net: np.ndarray  # cumulative unobserved exits minus entries, per step
    config: ScenarioConfig


def demand_profile(config: ScenarioConfig, rng) -> np.ndarray:
    """Arrival rate in veh/s for every second of the day."""
    seconds = np.arange(config.n_steps * STEP_S, dtype=float)
    clock_h = config.start.hour + config.start.minute / 60 + seconds / 3600
    rate = np.full(seconds.size, float(config.base_demand_vph))
    width_h = config.peak_width_min / 60
    for center in config.peak_centers_h:
        c = center + rng.normal(0.0, config.peak_jitter_min / 60)
        amp = config.peak_demand_vph * (1.0 + rng.uniform(-1, 1) * config.amplitude_spread)
        rate += amp * np.exp(-0.5 * ((clock_h - c) / width_h) ** 2)
    return rate / 3600.0


def _unobserved_ticks(config: ScenarioConfig, seconds: int, rng) -> np.ndarray:
    rate = abs(config.lambda_c)
    if config.exit_process == "poisson":
        return rng.poisson(rate, size=seconds)
    cum = np.floor(rate * np.arange(1, seconds + 1) + 1e-9)
    return np.diff(cum, prepend=0.0).astype(int)


def simulate_queue(config: ScenarioConfig, seed: int):
    """Run the point queue; returns per-step counts and per-second queue meters."""
    seeds = np.random.SeedSequence(seed).spawn(4)
    r_demand, r_arrive, r_exit = (np.random.default_rng(s) for s in seeds[:3])
    geo = config.geometry
    lanes = geo.lanes
    cap = int(np.floor(geo.q_max_m * lanes / JAM_SPACING_M + 1e-9))
    seconds = config.n_steps * STEP_S
    arrivals = r_arrive.poisson(demand_profile(config, r_demand))
    side = _unobserved_ticks(config, seconds, r_exit)
    offset = int(r_demand.integers(config.cycle_s))
    discharge = config.saturation_vps_per_lane * lanes

    n_q = backlog = 0
    credit = 0.0
    cum_in = cum_out = unobs = 0
    a_steps = np.zeros(config.n_steps)
    d_steps = np.zeros(config.n_steps)
    e_steps = np.zeros(config.n_steps)
    q_sec = np.zeros(seconds)
    truth = np.zeros(config.n_steps)
    exits = config.lambda_c > 0
    for s in range(seconds):
        if s % STEP_S == 0:
            k = s // STEP_S
            # step k holds the state before second 10k is processed
            a_steps[k], d_steps[k], e_steps[k] = cum_in, cum_out, unobs
            truth[k] = min(n_q * JAM_SPACING_M / lanes, geo.q_max_m)
        counted = arrivals[s] + backlog
        uncounted = 0
        if side[s]:
            if exits:
                cum_in += side[s]  # counted at entry, gone before the stop line
                unobs += side[s]
            else:
                uncounted = side[s]
                unobs -= side[s]
        present = n_q + counted + uncounted
        if (s + offset) % config.cycle_s < config.green_s:
            credit += discharge
            out = min(present, int(credit))
            credit -= out
            if out == present:
                credit = min(credit, discharge)
        else:
            credit = 0.0
            out = 0
        remaining = present - out
        held = max(0, remaining - cap)
        held = min(held, counted)
        backlog = held
        cum_in += counted - held
        n_q = remaining - held
        cum_out += out
        q_sec[s] = min(n_q * JAM_SPACING_M / lanes, geo.q_max_m)
    return a_steps, d_steps, e_steps, truth, q_sec


def emit_afcd(queue_per_second_m, config: ScenarioConfig, rng) -> np.ndarray:
    """``(n_segments, n_intervals)`` speeds from the interval-mean queue."""
    ratio = AFCD_INTERVAL_S
    n_int = -(-config.n_steps * STEP_S // ratio)
    padded = np.full(n_int * ratio, np.nan)
    padded[: queue_per_second_m.size] = queue_per_second_m
    qbar = np.nanmean(padded.reshape(n_int, ratio), axis=1)
    lag = config.afcd_delay_s // ratio
    src = np.maximum(np.arange(n_int) - lag, 0)
    model = MeasurementModel(config.geometry, config.regimes)
    speeds = model.expected_speeds(qbar[src]).T
    if config.noise_std > 0:
        rg = config.regimes
        speeds = np.clip(speeds + rng.normal(0.0, config.noise_std, speeds.shape), 0.5 * rg.v_jam, 1.2 * rg.v_free)
    if config.missing_prob > 0:
        drop = rng.random(speeds.shape) < config.missing_prob
        drop[:, 0] = False
        speeds = np.where(drop, np.nan, speeds)
    return speeds


def simulate_day(config: ScenarioConfig = ScenarioConfig(), seed: int = 0) -> SimOutput:
    a, d, e, truth, q_sec = simulate_queue(config, seed)
    feed_rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(4)[3])
    afcd = emit_afcd(q_sec, config, feed_rng)
    day = SensorDay(cum_inflow=a, cum_outflow=d, afcd_speeds=afcd, t0=config.start, ground_truth_m=truth)
    return SimOutput(day=day, queue_per_second_m=q_sec, unobserved_net=e, config=config)


def simulate_days(config: ScenarioConfig, seeds):
    return [simulate_day(config, s).day for s in seeds]


def scenario_from_dict(cfg: dict, geometry: SectionGeometry = None, regimes: SpeedRegimes = None) -> ScenarioConfig:
    """Scenario from a parsed mapping of :class:`ScenarioConfig` field names."""
    known = {f.name for f in fields(ScenarioConfig)} - {"geometry", "regimes", "start"}
    unknown = set(cfg) - known
    if unknown:
        raise ValueError(f"unknown scenario keys: {', '.join(sorted(unknown))}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in cfg.items()}
    if geometry is not None:
        kw["geometry"] = geometry
    if regimes is not None:
        kw["regimes"] = regimes
    return ScenarioConfig(**kw)


def scenario_to_dict(config: ScenarioConfig) -> dict:
    out = {k: v for k, v in asdict(config).items() if k not in ("geometry", "regimes", "start")}
    return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}
