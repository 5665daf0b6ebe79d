"""Desk-scale windowed-attention classifier with dynamic window mixing,
cross-scale fusion, diffusion-noise consistency, and confidence-thresholded
semi-supervised training, on a from-scratch reverse-mode autodiff core."""

from .errors import (ConfigError, DcswinError, FormatError,
                     MetricUndefinedError, NumericsError, ShapeError,
                     TapeError)
from .tensor import Tape, Tensor, backward, checked_mode, no_grad
from .model import DCSWin, ModelConfig

__version__ = "0.1.0"

__all__ = [
    "Tensor", "Tape", "backward", "no_grad", "checked_mode",
    "DCSWin", "ModelConfig",
    "DcswinError", "ShapeError", "ConfigError", "NumericsError",
    "TapeError", "FormatError", "MetricUndefinedError",
    "__version__",
]
