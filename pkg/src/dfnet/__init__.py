"""Salient object detection with multi-scale attention features,

trained with a sharpening loss, on a small numpy autodiff core.
"""

from .errors import (ConfigError, DFNetError, FormatError, NumericError,
                     TrainingDiverged, UsageError)
from .tensor import Tape, Tensor, backward, grad_check

__all__ = [
    "ConfigError",
    "DFNetError",
    "FormatError",
    "NumericError",
    "TrainingDiverged",
    "UsageError",
    "Tape",
    "Tensor",
    "backward",
    "grad_check",
]

__version__ = "0.1.0"
