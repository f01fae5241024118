"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigurationError(ValueError):
    """A schedule, config file, or hyperparameter set is inconsistent."""


class InputError(ValueError):
    """User-supplied data (waveform, labels, checkpoint) is unusable."""
