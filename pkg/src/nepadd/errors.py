"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class NepaddError(Exception):
    exit_code = 1


class ConfigError(NepaddError, ValueError):
    exit_code = 2


class ShapeError(ConfigError):
    """Dimension mismatch between operands or against a layer config."""


class ContractError(NepaddError, ValueError):
    exit_code = 2


class DomainError(NepaddError, ValueError):
    exit_code = 4


class DataError(NepaddError):
    exit_code = 3


class NumericAbort(NepaddError, FloatingPointError):
    exit_code = 4
