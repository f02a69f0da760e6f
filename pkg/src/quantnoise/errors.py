"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes (see cli.EXIT_CODES), so new
error types should subclass one of the four categories below.
"""


class QuantNoiseError(Exception):
    """Base class for all package errors."""


class ConfigError(QuantNoiseError):
    """Invalid configuration, flags, or arguments (exit code 2)."""


class DataError(QuantNoiseError):
    """Dataset or file-format problem (exit code 3)."""


class NumericError(QuantNoiseError):
    """Numeric failure: NaN loss, non-finite tensors, overflow (exit code 4)."""


class FitConvergenceError(QuantNoiseError):
    """The logistic fit did not converge or the sweep is degenerate (exit code 5)."""


class ShapeError(ConfigError):
    """Tensor shape mismatch. Shape problems are never silently broadcast."""
