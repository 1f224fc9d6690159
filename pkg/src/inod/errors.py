"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor or grid shapes are incompatible for the requested op."""


class ArgumentError(ValueError):
    """An argument violates an op's contract (bad range, unattainable window, ...)."""


class ConfigError(ValueError):
    """A configuration object or file is invalid or inconsistent."""


class StatisticsError(ValueError):
    """Dataset statistics are unusable (e.g. zero standard deviation)."""


class DataError(RuntimeError):
    """Input data on disk is missing, unreadable, or malformed."""
