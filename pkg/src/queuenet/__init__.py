"""Queue-length estimation at signalised approaches from counts and aggregated floating-car speeds."""

from .domain import FilterTrace, SectionGeometry, SensorDay, SpeedRegimes
from .estimator import QueueEstimator
from .exceptions import DataError, NumericError, QueueNetError
from .filter import EkfParams, StreamingEstimator, run_day
from .gainnet import GainNet, GainNetConfig
from .simulator import ScenarioConfig, simulate_day, simulate_days

__all__ = [
    "DataError", "EkfParams", "FilterTrace", "GainNet", "GainNetConfig", "NumericError", "QueueEstimator",
    "QueueNetError", "ScenarioConfig", "SectionGeometry", "SensorDay", "SpeedRegimes", "StreamingEstimator",
    "run_day", "simulate_day", "simulate_days",
]
