"""Self-supervised monocular depth with a rich-resource prior bank."""
from .errors import (ConfigError, DataIOError, EvaluationError, FormatError, NumericError,
                     RPrDepthError, StageOrderError, ValidationError)

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataIOError", "EvaluationError", "FormatError", "NumericError",
           "RPrDepthError", "StageOrderError", "ValidationError", "__version__"]
