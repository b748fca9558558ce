"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when an operation receives malformed or non-finite input."""


class SolverDivergedError(RuntimeError):
    """Raised when a numerical solve produces non-finite values."""


class GridFormatError(ValueError):
    """Raised when a value-function cache file fails validation."""


class MetricUnavailableError(RuntimeError):
    """Raised when a metric is requested from a trace lacking the needed records."""
