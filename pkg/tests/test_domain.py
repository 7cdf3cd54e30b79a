from datetime import datetime

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from queuenet.domain import (SectionGeometry, SensorDay, SpeedRegimes, clamp_queue, expand_afcd,
                             impute_causal, impute_missing, peak_mask)
from queuenet.exceptions import AlignmentError, DataError

from conftest import make_day

nan = np.nan


class TestExpandAfcd:
    def test_single_interval_replicated(self):
        np.testing.assert_array_equal(expand_afcd([[12.0]], 6), [[12.0] * 6])

    def test_two_intervals(self):
        np.testing.assert_array_equal(expand_afcd([12.0, 3.0], 12), [[12.0] * 6 + [3.0] * 6])

    def test_too_few_intervals(self):
        with pytest.raises(AlignmentError):
            expand_afcd([12.0], 9)

    def test_trailing_partial_interval_allowed(self):
        assert expand_afcd([[1.0, 2.0]], 8).shape == (1, 8)

    def test_too_many_intervals(self):
        with pytest.raises(AlignmentError):
            expand_afcd([[1.0, 2.0, 3.0]], 6)

    @given(st.lists(st.floats(0, 30), min_size=1, max_size=20), st.integers(0, 5))
    def test_every_step_reads_its_interval(self, values, short):
        steps = max(1, 6 * len(values) - short)
        out = expand_afcd([values], steps)[0]
        assert all(out[t] == values[t // 6] for t in range(steps))


class TestImputeMissing:
    def test_forward_fill(self):
        np.testing.assert_array_equal(impute_missing([5.0, nan, nan, 7.0]), [5.0, 5.0, 5.0, 7.0])

    def test_leading_gap_takes_first_present(self):
        np.testing.assert_array_equal(impute_missing([nan, 4.0]), [4.0, 4.0])

    def test_empty_segment(self):
        with pytest.raises(DataError):
            impute_missing([nan, nan])

    @given(st.lists(st.one_of(st.none(), st.floats(0, 30)), min_size=1, max_size=30)
           .filter(lambda xs: any(x is not None for x in xs)))
    def test_matches_loop_oracle(self, xs):
        series = np.array([nan if x is None else x for x in xs])
        first = next(x for x in xs if x is not None)
        expected, last = [], first
        for x in xs:
            last = last if x is None else x
            expected.append(last)
        np.testing.assert_array_equal(impute_missing(series), expected)

    def test_rows_are_independent(self):
        out = impute_missing([[nan, 1.0], [2.0, nan]])
        np.testing.assert_array_equal(out, [[1.0, 1.0], [2.0, 2.0]])

    def test_causal_fill_uses_default_for_leading_gap(self):
        np.testing.assert_array_equal(impute_causal([nan, 4.0, nan], 14.0), [14.0, 4.0, 4.0])


class TestClampQueue:
    @pytest.mark.parametrize("x, expected", [(-3.0, 0.0), (9999.0, 450.0), (120.0, 120.0)])
    def test_examples(self, x, expected):
        assert clamp_queue(x, 450) == expected

    @given(st.floats(-1e6, 1e6), st.floats(1, 1e4))
    def test_in_range_and_idempotent(self, x, q_max):
        c = clamp_queue(x, q_max)
        assert 0 <= c <= q_max
        assert clamp_queue(c, q_max) == c


class TestTypes:
    def test_geometry_invariants(self):
        with pytest.raises(DataError):
            SectionGeometry(100.0, 1, ((0, 50), (60, 100)), 100.0)
        with pytest.raises(DataError):
            SectionGeometry(100.0, 1, ((10, 100),), 100.0)
        with pytest.raises(DataError):
            SectionGeometry(100.0, 0, ((0, 100),), 100.0)
        with pytest.raises(DataError):
            SectionGeometry(100.0, 1, ((0, 100),), 120.0)

    def test_uniform_geometry(self):
        g = SectionGeometry.uniform(600.0, 5)
        assert g.n_segments == 5 and g.segments[-1] == (480.0, 600.0)

    def test_regimes_order(self):
        with pytest.raises(DataError):
            SpeedRegimes(v_free=2.0, v_jam=14.0)

    def test_counts_must_be_monotone(self):
        with pytest.raises(DataError):
            make_day(6, inflow=[0, 1, 0, 1, 2, 3])

    def test_counts_and_afcd_lengths(self):
        with pytest.raises(AlignmentError):
            SensorDay(np.zeros(18), np.zeros(18), np.zeros((2, 2)))
        assert SensorDay(np.zeros(17), np.zeros(17), np.zeros((2, 3))).n_steps == 17

    def test_peak_mask(self):
        day = SensorDay(np.zeros(12), np.zeros(12), np.zeros((1, 2)), t0=datetime(2024, 1, 1, 6, 59))
        mask = peak_mask(day, "07:00", "07:01")
        assert mask.tolist() == [False] * 6 + [True] * 6
