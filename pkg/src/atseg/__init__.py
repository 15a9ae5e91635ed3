"""Convolution-free 3D segmentation with patch self-attention."""

from .model import AttentionRecord, Hyperparams, ModelWeights, init_weights
from .tensor import Tape, Tensor, backward, grad_check
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AttentionRecord", "Hyperparams", "ModelWeights", "init_weights",
    "Tape", "Tensor", "backward", "grad_check", "TrainConfig", "train",
    "__version__",
]
