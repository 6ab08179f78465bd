"""Minimal dense tensor engine with reverse-mode differentiation."""

from . import functional
from .checkpoint import load_checkpoint, save_checkpoint
from .functional import softmax, softmax_cross_entropy
from .layers import (
    LayerParams,
    batchnorm_layer,
    batchnorm_stats,
    conv2d_layer,
    count_parameters,
    forward,
    linear_layer,
    temporal_layer,
)
from .optim import OptimizerState, sgd_step
from .tensor import Tensor, backward, zero_grad

__all__ = [
    "LayerParams",
    "OptimizerState",
    "Tensor",
    "backward",
    "batchnorm_layer",
    "batchnorm_stats",
    "conv2d_layer",
    "count_parameters",
    "forward",
    "functional",
    "linear_layer",
    "load_checkpoint",
    "save_checkpoint",
    "sgd_step",
    "softmax",
    "softmax_cross_entropy",
    "temporal_layer",
    "zero_grad",
]
