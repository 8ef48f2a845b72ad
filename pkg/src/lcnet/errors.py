"""Exception hierarchy. The CLI maps each family to an exit code."""


class LcnetError(Exception):
    exit_code = 1


class ConfigError(LcnetError, ValueError):
    exit_code = 1


class DataError(LcnetError, ValueError):
    exit_code = 2


class NumericalError(LcnetError, ArithmeticError):
    exit_code = 3


class InsufficientSamplesError(DataError):
    pass


class ZeroVarianceError(DataError):
    """A coordinate never moves, so its dependence on anything is undefined."""
