import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from queuenet.baselines import KMH, isc_estimate, osd_day, osd_estimate
from queuenet.domain import SectionGeometry, SensorDay

GEO3 = SectionGeometry.uniform(300.0, 3, lanes=2, q_max_m=300.0)
GEO30 = SectionGeometry.uniform(300.0, 30, lanes=2, q_max_m=300.0)


def kmh(*values):
    return np.array(values, dtype=float) / KMH


class TestOsd:
    def test_boundary_after_first_segment(self):
        assert osd_estimate(kmh(10, 20, 30), GEO3) == 100.0

    def test_all_fast(self):
        assert osd_estimate(kmh(30, 30, 30), GEO3) == 0.0

    def test_all_slow(self):
        assert osd_estimate(kmh(10, 10, 10), GEO3) == GEO3.q_max_m

    def test_outermost_boundary_wins(self):
        assert osd_estimate(kmh(10, 30, 10, 30, 30), SectionGeometry.uniform(500.0, 5)) == 300.0

    def test_length_checked(self):
        with pytest.raises(ValueError):
            osd_estimate(kmh(10, 20), GEO3)

    def test_day_holds_value_within_interval(self):
        afcd = np.stack([kmh(10, 10), kmh(20, 10), kmh(30, 30)])
        day = SensorDay(np.zeros(12), np.zeros(12), afcd)
        out = osd_day(day, GEO3)
        np.testing.assert_array_equal(out, [100.0] * 6 + [200.0] * 6)

    @given(st.lists(st.floats(1, 60), min_size=3, max_size=3))
    def test_range_and_grid(self, speeds):
        q = osd_estimate(kmh(*speeds), GEO3)
        assert q in (0.0, 100.0, 200.0, 300.0)


class TestIsc:
    def test_uniform_free_flow(self):
        assert not isc_estimate(np.full((30, 2), 14.0), GEO30).any()

    def test_step_field(self):
        speeds = np.where(GEO30.ends <= 150.0, 2.0, 14.0)[:, None]
        est = isc_estimate(speeds, GEO30)
        assert est.shape == (6,)
        assert np.all(np.abs(est - 150.0) <= 5.0)

    def test_isolated_far_patch(self):
        speeds = np.full((30, 1), 14.0)
        speeds[-3:] = 2.0
        assert np.all(isc_estimate(speeds, GEO30) == 300.0)

    def test_capped_at_q_max(self):
        geo = SectionGeometry.uniform(300.0, 30, lanes=2, q_max_m=120.0)
        assert np.all(isc_estimate(np.full((30, 1), 2.0), geo) == 120.0)

    def test_missing_values_imputed(self):
        speeds = np.where(GEO30.ends <= 150.0, 2.0, 14.0)[:, None].repeat(2, axis=1)
        gappy = speeds.copy()
        gappy[5, 1] = np.nan
        np.testing.assert_array_equal(isc_estimate(gappy, GEO30), isc_estimate(speeds, GEO30))
