"""Exception types shared across the package."""


class SdganError(Exception):
    """Base class for all package errors."""


class DimensionError(SdganError, ValueError):
    """Tensor shapes do not fit an operation."""


class ContractError(SdganError, RuntimeError):
    """A precondition of an operation was violated by the caller."""


class ConfigError(SdganError, ValueError):
    """Invalid configuration value."""


class BoundsError(SdganError, ValueError):
    """A rectangle or index falls outside the image."""


class FormatError(SdganError, ValueError):
    """Malformed file contents.

    ``offset`` is the byte position where parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(SdganError, ArithmeticError):
    """A loss or activation became non-finite."""
