"""Exception types raised across the package."""


class CorruptMetricError(ValueError):
    """A validation metric was NaN or infinite."""


class DivergenceError(FloatingPointError):
    """A training loss or intermediate became non-finite."""


class FormatError(ValueError):
    """A data or checkpoint file does not follow its binary layout."""


class ConfigError(ValueError):
    """An experiment configuration is malformed or inconsistent."""
