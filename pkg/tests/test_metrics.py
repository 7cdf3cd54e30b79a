import math
from datetime import datetime

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from queuenet.domain import SensorDay
from queuenet.metrics import (compute_metrics, first_crossing, format_mape, improvement, onset_lag_s,
                              scope_metrics, sustained_crossing)


class TestScopeMetrics:
    def test_identical(self):
        m = scope_metrics([0.0, 20.0, 50.0], [0.0, 20.0, 50.0])
        assert (m.rmse_m, m.mae_m, m.mape_pct) == (0.0, 0.0, 0.0)

    def test_hand_values_and_undefined_mape(self):
        m = scope_metrics([0.0, 0.0], [3.0, 4.0])
        assert m.rmse_m == pytest.approx(3.5355339, abs=1e-6)
        assert m.mae_m == 3.5
        assert math.isnan(m.mape_pct) and format_mape(m.mape_pct) == "undefined"

    def test_mape(self):
        assert scope_metrics([20.0], [25.0]).mape_pct == pytest.approx(25.0)

    def test_mape_ignores_small_truth(self):
        assert scope_metrics([5.0, 20.0], [50.0, 25.0]).mape_pct == pytest.approx(25.0)

    def test_misaligned(self):
        with pytest.raises(ValueError):
            scope_metrics([1.0], [1.0, 2.0])

    @given(st.lists(st.floats(0, 500), min_size=1, max_size=50), st.floats(-100, 100))
    def test_constant_bias(self, truth, c):
        m = scope_metrics(truth, np.array(truth) + c)
        assert m.rmse_m == pytest.approx(abs(c), abs=1e-9) and m.mae_m == pytest.approx(abs(c), abs=1e-9)

    @given(st.lists(st.tuples(st.floats(0, 500), st.floats(0, 500)), min_size=1, max_size=50))
    def test_mae_at_most_rmse(self, pairs):
        truth, est = np.array(pairs).T
        m = scope_metrics(truth, est)
        assert m.mae_m <= m.rmse_m + 1e-9


class TestReport:
    def test_peak_scopes_from_clock(self):
        day = SensorDay(np.zeros(1440), np.zeros(1440), np.full((3, 240), 14.0), t0=datetime(2024, 1, 1, 6, 0))
        truth = np.zeros(1440)
        est = np.zeros(1440)
        est[720:] = 10.0  # 08:00 onwards
        report = compute_metrics(truth, {"m": est}, peaks={"morning": ("07:00", "09:00")}, day=day)
        assert report.get("m", "morning").mae_m == pytest.approx(5.0)
        assert report.get("m").mae_m == pytest.approx(5.0)
        assert "morning" in report.table()


class TestImprovement:
    def test_hand_value(self):
        assert improvement(188.99, 71.65) == pytest.approx(62.087, abs=1e-3)

    def test_equal(self):
        assert improvement(10.0, 10.0) == 0.0

    def test_perfect(self):
        assert improvement(10.0, 0.0) == 100.0

    def test_zero_baseline(self):
        with pytest.raises(ZeroDivisionError):
            improvement(0.0, 1.0)


class TestOnset:
    def test_first_crossing(self):
        assert first_crossing([0, 10, 60, 0, 70], 50) == 2
        assert first_crossing([0, 10], 50) is None

    def test_sustained_ignores_spike(self):
        s = np.zeros(200)
        s[10] = 100.0
        s[100:] = 80.0
        assert sustained_crossing(s, 50.0, 30) == 100
        assert sustained_crossing(s, 50.0, 1) == 10

    def test_lag(self):
        truth = np.where(np.arange(300) >= 100, 80.0, 0.0)
        est = np.where(np.arange(300) >= 130, 80.0, 0.0)
        assert onset_lag_s(truth, est) == 300.0
        assert onset_lag_s(est, truth) == -300.0

    def test_lag_edge_cases(self):
        assert onset_lag_s(np.zeros(50), np.zeros(50)) is None
        assert onset_lag_s(np.full(50, 80.0), np.zeros(50)) == math.inf
