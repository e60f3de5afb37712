"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes, so new failure modes should subclass one
of the three families below rather than raising bare ``ValueError``.
"""


class APCDEError(Exception):
    """Root of all package errors."""


class ConfigurationError(APCDEError, ValueError):
    """Inconsistent widths, layouts, heads or command options."""


class ArgumentError(ConfigurationError):
    pass


class DataError(APCDEError, ValueError):
    """Malformed or out-of-range input data."""


class SchemaError(DataError):
    pass


class DegenerateDataError(DataError):
    pass


class CheckpointError(DataError):
    """Unreadable, truncated, tampered or incompatible checkpoint."""


class NumericalError(APCDEError, ArithmeticError):
    """Non-finite values, singular matrices, divergence."""


class SingularMatrixError(NumericalError):
    pass


class DivergenceError(NumericalError):
    def __init__(self, message, epoch_log=None):
        super().__init__(message)
        self.epoch_log = list(epoch_log or [])
