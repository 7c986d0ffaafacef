"""Exception hierarchy; each class carries the CLI exit code it maps to."""


class TiiLstmError(Exception):
    exit_code = 1


class ConfigError(TiiLstmError, ValueError):
    """Bad usage, configuration or parameter values."""

    exit_code = 2


class DataError(TiiLstmError, ValueError):
    """Input data that cannot be loaded, mapped or labelled."""

    exit_code = 3


class LoadError(DataError):
    pass


class NumericError(TiiLstmError, ArithmeticError):
    """Non-finite values encountered during training or inference."""

    exit_code = 4
