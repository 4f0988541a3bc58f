"""Exception hierarchy. CLI exit codes key off these classes."""


class ErpCondError(Exception):
    exit_code = 4


class ConfigurationError(ErpCondError, ValueError):
    """Invalid configuration, shapes, or call order."""

    exit_code = 2


class DataError(ErpCondError):
    """Input data missing, malformed, or insufficient."""

    exit_code = 3


class UnknownSubjectError(DataError, KeyError):
    pass


class UndefinedMetricError(DataError):
    pass


class NumericError(ErpCondError, ArithmeticError):
    """Non-finite values during training or checking."""

    exit_code = 4


class InternalError(ErpCondError, RuntimeError):
    exit_code = 4


class UnsupportedError(ConfigurationError):
    """Operation not defined for this model or input."""
