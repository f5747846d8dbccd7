"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration, shapes or ranges."""


class UsageError(RuntimeError):
    """An API was called in the wrong order (e.g. backward before forward)."""


class NumericalError(FloatingPointError):
    """A non-finite value appeared where finite values are required."""


class CheckpointError(RuntimeError):
    """Checkpoint container could not be read or failed its integrity check."""
