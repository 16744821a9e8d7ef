"""Exception types raised across the package."""


class PriorLiftError(Exception):
    """Base class for all package errors."""


class InvalidInputError(PriorLiftError, ValueError):
    pass


class InvalidCameraError(InvalidInputError):
    pass


class ConfigError(PriorLiftError, ValueError):
    pass


class FormatError(PriorLiftError, ValueError):
    """A checkpoint, grid or manifest file could not be parsed."""


class NoObjectError(PriorLiftError):
    """Raised when a render contains no valid (opaque) pixels."""


class BackendError(PriorLiftError, RuntimeError):
    """A guidance oracle, generator or scorer failed.

    ``context`` carries whatever locates the failure (view label, timestep, ...).
    """

    def __init__(self, message, **context):
        self.context = context
        if context:
            detail = ", ".join(f"{k}={v!r}" for k, v in context.items())
            message = f"{message} ({detail})"
        super().__init__(message)


class NonFiniteLossError(PriorLiftError, FloatingPointError):
    pass
