"""Exception hierarchy. CLI exit codes hang off the two top-level families."""


class QueueNetError(Exception):
    """Base class for all package errors."""


class DataError(QueueNetError):
    """Input data is malformed, misaligned or insufficient (exit code 3)."""


class NumericError(QueueNetError):
    """A computation produced a non-finite or singular result (exit code 4)."""


class AlignmentError(DataError):
    pass


class RegimeEstimationError(DataError):
    def __init__(self, message, histogram=None):
        super().__init__(message)
        self.histogram = histogram


class EstimationError(DataError):
    """A regression or rescaling step had no usable support."""


class GroupingError(DataError):
    pass


class OptimizerError(NumericError):
    pass


class CheckpointError(DataError):
    pass
