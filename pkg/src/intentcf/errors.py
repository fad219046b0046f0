"""Exception types shared across the engine.

The CLI maps these onto exit codes: configuration problems exit with 2,
data problems with 3, numeric failures with 4.
"""


class ConfigError(ValueError):
    """Invalid configuration value or an inconsistent combination of settings."""


class DataError(ValueError):
    """Malformed input data, unreadable files, or incompatible artifacts."""


class SamplingError(DataError):
    """The dataset is degenerate for negative sampling."""


class NumericError(ArithmeticError):
    """A non-finite value was produced during computation."""
