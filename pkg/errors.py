"""
Error types shared by every module.

Each error carries the process exit code the CLI reports for it.
"""


class FNRError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(FNRError):
    """Unknown key, bad value or bad usage."""

    exit_code = 1


class DataError(FNRError):
    """Malformed dataset, label outside {0, 1}, dimension mismatch."""

    exit_code = 2


class ContractError(FNRError):
    """A caller broke an operation's precondition."""

    exit_code = 3


class ShapeError(ContractError):
    """Operand shapes do not conform."""

    exit_code = 3


class NumericError(FNRError):
    """NaN/Inf during training, or a failed gradient check."""

    exit_code = 3
