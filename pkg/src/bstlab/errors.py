"""Exception types shared across the package.

Every error a caller is expected to branch on gets its own class so tests
and the CLI can distinguish configuration mistakes from runtime failures.
"""


class BstError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(BstError, ValueError):
    """Array shapes or widths do not line up."""


class ConfigError(BstError, ValueError):
    """Invalid configuration value or unknown configuration key."""


class StateError(BstError, RuntimeError):
    """Operation called in the wrong order (e.g. backward before forward)."""


class NumericError(BstError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class FormatError(BstError, ValueError):
    """Malformed binary file. Carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedError(BstError, ValueError):
    """Requested operation is defined only for a narrower input class."""
