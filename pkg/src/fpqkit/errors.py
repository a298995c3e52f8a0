"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, NumericError -> 3.
"""


class FpqError(Exception):
    """Base class for all package errors."""


class ShapeError(FpqError, ValueError):
    """Tensor dimensions do not satisfy an operation's contract."""


class ConfigError(FpqError, ValueError):
    """Invalid format string, parameter value, or config/manifest file."""


class NumericError(FpqError, ArithmeticError):
    """Non-finite input or unrecoverable numeric failure."""


class DecodeError(FpqError, ValueError):
    """Corrupt or out-of-range data in a serialized artifact."""
