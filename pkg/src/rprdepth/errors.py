"""Exception hierarchy shared by every stage of the pipeline."""


class RPrDepthError(Exception):
    exit_code = 1


class ConfigError(RPrDepthError, ValueError):
    """Invalid sizes, fractions, counts or unknown config keys."""


class ValidationError(RPrDepthError, ValueError):
    """Inputs that violate a documented shape or value contract."""


class FormatError(RPrDepthError, IOError):
    exit_code = 2


class DataIOError(RPrDepthError, IOError):
    exit_code = 2


class NumericError(RPrDepthError, ArithmeticError):
    exit_code = 3


class EvaluationError(RPrDepthError, ValueError):
    """Raised when there is nothing valid to evaluate."""


class StageOrderError(RPrDepthError, RuntimeError):
    """A pipeline stage was requested before its prerequisites exist."""
