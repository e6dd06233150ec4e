"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or combination of values."""


class DataFormatError(ValueError):
    """Malformed dataset file or inconsistent example collection."""


class DegenerateScoresError(RuntimeError):
    """Score spread collapsed: the lower threshold is not below the upper one."""


class TrainingDivergedError(RuntimeError):
    """A loss became non-finite or exceeded the divergence limit."""
