"""Exception types shared across the package."""


class ClassgenError(Exception):
    """Base class for all package-specific errors."""


class InputShapeError(ClassgenError, ValueError):
    """An array argument has the wrong shape, channel count, or dimension."""


class ConfigError(ClassgenError, ValueError):
    """Invalid configuration value or inconsistent option combination."""


class NumericalError(ClassgenError, RuntimeError):
    """A non-finite value appeared where a finite one is required.

    ``step_index`` identifies the offending sampling step when raised from
    the optimization loop; it is None otherwise.
    """

    def __init__(self, message, step_index=None):
        super().__init__(message)
        self.step_index = step_index


class ModelStoreError(ClassgenError, ValueError):
    """A model container is corrupted, truncated, or version-incompatible."""
