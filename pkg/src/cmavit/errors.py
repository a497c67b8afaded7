"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: config errors -> 2, data errors -> 3,
numeric failures -> 4.
"""


class CmavitError(Exception):
    pass


class DimensionError(CmavitError, ValueError):
    """Tensor shapes do not line up."""


class ParameterError(CmavitError, ValueError):
    """An argument lies outside its admissible range."""


class UsageError(CmavitError, RuntimeError):
    """An API was called in a state it does not support."""


class ConfigError(CmavitError, ValueError):
    pass


class DataError(CmavitError, ValueError):
    pass


class NumericError(CmavitError, FloatingPointError):
    """Non-finite values appeared in a computation."""


class UndefinedMetricError(ParameterError):
    """A metric is undefined for the given inputs (e.g. R² of constant truth)."""
