"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class ConfigurationError(ValueError):
    """Raised for invalid model, grid or training configuration."""


class StateError(RuntimeError):
    """Raised when an object is used in an invalid lifecycle state."""


class NumericalError(FloatingPointError):
    """Raised when a computation produces non-finite values."""


class LoadError(ValueError):
    """Raised when an on-disk artifact is malformed."""
