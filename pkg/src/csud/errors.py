"""Exception types shared across the package."""


class CsudError(Exception):
    """Base class for all package-specific errors."""


class InvalidInputError(CsudError, ValueError):
    """An argument violates a documented precondition (shape, channel count, range)."""


class ConfigurationError(CsudError):
    """A run configuration is unusable (missing files, bad enum value, empty corpus)."""


class ImageIOError(CsudError, OSError):
    """An image file could not be read or written; the message carries the path."""


class DivergenceError(CsudError):
    """Training produced a non-finite loss or parameter.

    Carries the last loss report (when available) so the failure is inspectable.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
