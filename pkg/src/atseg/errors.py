"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: UsageError/ConfigError -> 1,
DataError -> 2, NumericError -> 3.
"""


class AtsegError(Exception):
    pass


class UsageError(AtsegError):
    """Bad command line or run-config input."""


class ConfigError(UsageError):
    """Inconsistent hyperparameters or experiment configuration."""


class ShapeError(AtsegError, ValueError):
    """Operand shapes violate an operation's contract."""


class DataError(AtsegError):
    """Corrupt, missing, or out-of-range data on disk."""


class BadMagicError(DataError):
    """File does not start with the expected magic string."""


class PayloadMismatchError(DataError):
    """Declared payload length disagrees with the file contents."""


class UnknownDtypeError(DataError):
    """File header names a dtype this reader does not support."""


class NumericError(AtsegError):
    """Non-finite values or divergence encountered during computation."""


class UndefinedMetricError(AtsegError, ValueError):
    """A surface metric was requested for an empty foreground."""


class DegenerateCaseError(AtsegError, ValueError):
    """A statistical test has no defined answer for this input."""
