import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from queuenet.control import (DEFAULT_BAND, ControlInputTransformer, OnlineControl, ReconstructionParams,
                              affine_rescale, bandpass_filter, derive_control, estimate_lambda_offline,
                              estimate_lambda_online, reconstruct_queue_raw, select_band,
                              windowed_tracking_rmse)
from queuenet.domain import SectionGeometry, SensorDay
from queuenet.exceptions import DataError, EstimationError
from queuenet.simulator import ScenarioConfig, simulate_day

T = np.arange(5040) * 10.0
GEO = SectionGeometry.uniform(600.0, 5, lanes=2, q_max_m=600.0)


def day_from_net(net, through=0.5):
    """Monotone counts whose difference is ``net``."""
    d = through * np.arange(net.size) * 10.0
    return SensorDay(cum_inflow=d + net, cum_outflow=d, afcd_speeds=np.full((5, -(-net.size // 6)), 14.0))


class TestReconstruction:
    geometry = SectionGeometry.uniform(500.0, 5, lanes=2)
    params = ReconstructionParams(lambda_c=0.0, k_jam=0.1, k_free=0.02)

    def test_free_flow_occupancy_cancels(self):
        assert reconstruct_queue_raw(np.full(3, 20.0), self.params, self.geometry)[0] == pytest.approx(0.0)

    def test_excess_vehicles(self):
        assert reconstruct_queue_raw(np.full(3, 30.0), self.params, self.geometry)[0] == pytest.approx(62.5)

    def test_drift_term(self):
        params = ReconstructionParams(lambda_c=0.01, k_jam=0.1, k_free=0.02)
        q = reconstruct_queue_raw(np.full(101, 30.0), params, self.geometry)
        assert q[100] == pytest.approx(0.0, abs=1e-12)

    @given(st.floats(0, 500), st.floats(0, 500))
    def test_affine_in_net_accumulation(self, a, b):
        floor = 2 * 500 * 0.02
        qa, qb, q2 = (reconstruct_queue_raw(np.array([floor + v]), self.params, self.geometry)[0]
                      for v in (a, b, 2 * a))
        assert q2 == pytest.approx(2 * qa, abs=1e-9)
        assert (qb - qa) == pytest.approx((b - a) / (2 * 0.08), abs=1e-9)

    def test_invalid_params(self):
        with pytest.raises(DataError):
            ReconstructionParams(k_jam=0.01, k_free=0.02)
        with pytest.raises(DataError):
            ReconstructionParams(bandpass=(0.0, 0.2))


class TestLambda:
    def test_linear_drift(self):
        assert estimate_lambda_offline(0.05 * T, 60) == pytest.approx(0.05, abs=1e-12)

    def test_constant(self):
        assert estimate_lambda_offline(np.full(T.size, 7.0), 60) == pytest.approx(0.0, abs=1e-12)

    def test_noisy_drift(self):
        rng = np.random.default_rng(0)
        assert abs(estimate_lambda_offline(0.05 * T + rng.normal(0, 1, T.size), 60) - 0.05) < 0.005

    def test_ignores_queue_between_windows(self):
        net = 0.05 * T
        net[1000:3000] += 80.0
        assert estimate_lambda_offline(net, 180) == pytest.approx(0.05, abs=1e-12)

    def test_degenerate_support(self):
        with pytest.raises(EstimationError):
            estimate_lambda_offline(np.array([1.0]), 60)

    def test_online_converges_to_offline(self):
        rng = np.random.default_rng(1)
        net = 0.05 * T + rng.normal(0, 1, T.size)
        on, off = estimate_lambda_online(net, 60), estimate_lambda_offline(net, 60)
        assert abs(on[-1] - off) <= 0.01 * off

    def test_online_zero_drift(self):
        np.testing.assert_array_equal(estimate_lambda_online(np.full(500, 3.0), 60), 0.0)

    def test_online_piecewise_drift(self):
        net = np.where(T < T[-1] / 2, 0.03 * T, 0.03 * T[2520] + 0.07 * (T - T[2520]))
        final = estimate_lambda_online(net, 60)[-1]
        assert 0.03 < final < 0.07

    @given(st.integers(61, 400))
    def test_online_is_causal(self, cut):
        rng = np.random.default_rng(cut)
        net = np.cumsum(rng.uniform(0, 1, 400))
        full = estimate_lambda_online(net, 60)
        prefix = estimate_lambda_online(net[:cut], 60)
        np.testing.assert_allclose(full[:cut], prefix, rtol=0, atol=1e-12)


class TestRescaleAndFilter:
    def test_rescale_examples(self):
        np.testing.assert_allclose(affine_rescale([1, 2, 3], 450), [0, 225, 450])
        np.testing.assert_allclose(affine_rescale([0, 100, 450], 450), [0, 100, 450])
        np.testing.assert_allclose(affine_rescale([-5, 0, 5], 100), [0, 50, 100])

    def test_rescale_constant(self):
        with pytest.raises(EstimationError):
            affine_rescale([2, 2, 2], 10)

    def test_bandpass_removes_dc(self):
        assert np.max(np.abs(bandpass_filter(np.full(1000, 3.7), 1e-4, 5e-3))) <= 1e-9

    def test_bandpass_passes_in_band_sine(self):
        t = np.arange(5000) * 10.0
        s = np.sin(2 * np.pi * 1e-3 * t)
        assert np.sqrt(np.mean((bandpass_filter(s, 1e-4, 5e-3) - s) ** 2)) < 1e-6

    def test_bandpass_separates_components(self):
        t = np.arange(5000) * 10.0
        inband = np.sin(2 * np.pi * 1e-3 * t)
        s = 4.0 + inband + 0.5 * np.sin(2 * np.pi * 0.04 * t)
        assert np.sqrt(np.mean((bandpass_filter(s, 1e-4, 5e-3) - inband) ** 2)) < 1e-6

    @given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 1000))
    def test_bandpass_is_linear(self, a, b, seed):
        rng = np.random.default_rng(seed)
        s1, s2 = rng.normal(size=(2, 256))
        lhs = bandpass_filter(a * s1 + b * s2, 1e-4, 5e-3)
        rhs = a * bandpass_filter(s1, 1e-4, 5e-3) + b * bandpass_filter(s2, 1e-4, 5e-3)
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)

    def test_bandpass_zero_mean(self):
        rng = np.random.default_rng(5)
        assert abs(bandpass_filter(rng.normal(3, 1, 300), 1e-4, 5e-3).mean()) < 1e-12

    def test_bandpass_too_short(self):
        with pytest.raises(DataError):
            bandpass_filter(np.zeros(10), 1e-4, 5e-3)


class TestDeriveControl:
    def test_zero_counts(self):
        day = day_from_net(np.zeros(600), through=0.0)
        for mode in ("offline", "online"):
            assert not np.any(derive_control(day, GEO, mode=mode).u)

    def test_tracks_band_passed_true_queue_change(self):
        day = simulate_day(ScenarioConfig().clean(), seed=4).day
        u = derive_control(day, GEO).u
        true_change = np.diff(bandpass_filter(day.ground_truth_m, *DEFAULT_BAND), prepend=0.0)
        assert np.corrcoef(u, true_change)[0, 1] > 0.8

    def test_online_close_to_offline_on_linear_drift_day(self):
        # queue cycles of 30 min reaching a full queue, on a 0.05 veh/s drift
        net = 0.05 * T + 160.0 * (1 - np.cos(2 * np.pi * T / 1800.0)) / 2
        day = day_from_net(net)
        off = derive_control(day, GEO).u[360:]
        on = derive_control(day, GEO, mode="online").u[360:]
        assert np.sqrt(np.mean((on - off) ** 2)) < 0.1 * np.sqrt(np.mean(off**2))

    @given(st.integers(0, 10_000))
    def test_u_telescopes_to_reconstruction(self, seed):
        rng = np.random.default_rng(seed)
        net = np.cumsum(rng.integers(-1, 3, 400)).astype(float)
        net -= min(net.min(), 0)
        series = derive_control(day_from_net(net, through=2.0), GEO)
        q = series.reconstructed_q
        np.testing.assert_allclose(np.cumsum(series.u), q - q[0], atol=1e-9)

    def test_online_matches_streaming_object(self):
        day = simulate_day(ScenarioConfig(n_steps=720), seed=2).day
        batch = derive_control(day, GEO, mode="online")
        ctl = OnlineControl(GEO)
        streamed = np.array([ctl.push(a, d)[0] for a, d in zip(day.cum_inflow, day.cum_outflow)])
        np.testing.assert_array_equal(batch.u, streamed)

    @given(st.integers(30, 200))
    def test_online_never_reads_ahead(self, cut):
        day = simulate_day(ScenarioConfig(n_steps=240), seed=3).day
        full = derive_control(day, GEO, mode="online").u
        prefix = SensorDay(day.cum_inflow[:cut], day.cum_outflow[:cut], day.afcd_speeds[:, : -(-cut // 6)])
        np.testing.assert_array_equal(full[:cut], derive_control(prefix, GEO, mode="online").u)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            derive_control(day_from_net(np.arange(60.0)), GEO, mode="later")

    def test_transformer(self):
        days = [day_from_net(np.arange(60.0) % 7, through=2.0), day_from_net(np.arange(60.0) % 5, through=2.0)]
        out = ControlInputTransformer(geometry=GEO).fit(days).transform(days)
        assert out.shape == (2, 60)


class TestBandSelection:
    def test_tracking_rmse_of_exact_increments_is_zero(self):
        truth = np.abs(np.sin(np.arange(300) / 20.0)) * 100
        u = np.diff(truth, prepend=truth[0])
        assert windowed_tracking_rmse(u, truth) == pytest.approx(0.0, abs=1e-9)

    def test_select_band_returns_scored_candidate(self):
        days = [simulate_day(ScenarioConfig(), seed=s).day for s in (0, 1)]
        band, scores = select_band(days, GEO, low_periods_h=(2, 8))
        assert set(scores) == {2, 8}
        best = min(scores, key=scores.get)
        assert band == (1.0 / (best * 3600.0), DEFAULT_BAND[1])
