"""Exception hierarchy shared by every module; exit codes are stable CLI contract."""


class LocalICLError(Exception):
    """Base class for all errors raised by the toolkit"""

    exit_code = 1


class ContractViolation(LocalICLError, ValueError):
    """A caller broke a documented precondition (shapes, ranges, sizes)"""

    exit_code = 1


class MetricError(ContractViolation):
    """A metric is undefined on the given input (e.g. single-class AUC)"""


class ConfigError(LocalICLError):
    """Invalid or missing configuration"""

    exit_code = 2


class DataError(LocalICLError):
    """A dataset failed ingestion or model-constraint validation"""

    exit_code = 3


class NumericError(LocalICLError, ArithmeticError):
    """NaN/Inf produced by a kernel, a loss or a gradient"""

    exit_code = 4
