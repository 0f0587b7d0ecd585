"""Exception types shared across the package."""


class VpsplatError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(VpsplatError, ValueError):
    """An argument violates a documented precondition."""


class SceneFormatError(VpsplatError, RuntimeError):
    """A scene file is malformed, truncated, or fails its checksum."""


class DataError(VpsplatError, RuntimeError):
    """Dataset files are missing, inconsistent, or unreadable."""


class NumericError(VpsplatError, RuntimeError):
    """Optimization produced non-finite values."""
