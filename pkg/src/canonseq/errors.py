"""Exception types shared across the package."""


class DomainError(ValueError):
    """An input lies outside the domain an operation is defined on."""


class FormatError(ValueError):
    """A file could not be parsed under its declared format."""

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class WriteError(OSError):
    """A file could not be written."""


class TrainingError(RuntimeError):
    """Training produced a non-finite loss.

    ``last_state`` holds the parameters from the last step whose loss was finite.
    """

    def __init__(self, message, last_state=None, epoch=None):
        super().__init__(message)
        self.last_state = last_state
        self.epoch = epoch


class DependencyError(RuntimeError):
    """A pipeline stage was requested before its upstream checkpoints exist."""

    def __init__(self, message, missing=None):
        super().__init__(message)
        self.missing = missing


class ConfigError(ValueError):
    """Malformed configuration (unknown key, bad value)."""
