"""From-scratch grayscale image classification stack.

A numpy-backed autodiff engine, channel-attention and moment-exchange blocks,
adaptive histogram enhancement, a toy U-Net masker, Grad-CAM explanations,
and a two-stage cascade pipeline, all verified against brute-force oracles.
"""

from .errors import (CascadeNetError, CheckpointError, ConfigurationError,
                     InvalidInputError, TrainingError, UndefinedMetricError,
                     UsageError)
from .tensor import Tensor, backward, no_grad

__all__ = [
    "CascadeNetError", "CheckpointError", "ConfigurationError",
    "InvalidInputError", "TrainingError", "UndefinedMetricError", "UsageError",
    "Tensor", "backward", "no_grad",
]

__version__ = "0.1.0"
