import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from queuenet.domain import SectionGeometry, SensorDay, SpeedRegimes

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance_log(pytestconfig):
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""
    log = pytestconfig.stash.setdefault(ACCEPTANCE_KEY, {})

    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        log[number] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(ACCEPTANCE_KEY, {})
    if log:
        terminalreporter.section("acceptance criteria")
        for number in sorted(log):
            terminalreporter.write_line(log[number])


@pytest.fixture
def geometry5():
    return SectionGeometry.uniform(500.0, 5, lanes=2, q_max_m=450.0)


@pytest.fixture
def regimes():
    return SpeedRegimes(v_free=14.0, v_jam=2.0)


def make_day(n_steps=36, n_segments=5, speed=14.0, inflow=None, outflow=None, truth=None):
    a = np.zeros(n_steps) if inflow is None else np.asarray(inflow, dtype=float)
    d = np.zeros(n_steps) if outflow is None else np.asarray(outflow, dtype=float)
    k = -(-n_steps // 6)
    return SensorDay(cum_inflow=a, cum_outflow=d, afcd_speeds=np.full((n_segments, k), speed),
                     ground_truth_m=truth)
