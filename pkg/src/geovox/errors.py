"""Exception hierarchy. ``exit_code`` drives the CLI's process status."""


class GeovoxError(Exception):
    exit_code = 1


class ConfigError(GeovoxError, ValueError):
    exit_code = 2


class DataError(GeovoxError, ValueError):
    exit_code = 3


class ShapeError(DataError):
    pass


class GeometryError(DataError):
    pass


class BaselineError(DataError):
    pass


class UsageError(GeovoxError, RuntimeError):
    exit_code = 2


class NumericalError(GeovoxError, ArithmeticError):
    exit_code = 4


class TrainingError(NumericalError):
    pass


class SamplingError(NumericalError):
    pass
