"""Minimal reverse-mode automatic differentiation for training binary networks."""

from .ops import (
    BatchNormState,
    add,
    batchnorm,
    conv2d,
    cross_entropy,
    custom,
    elementwise,
    global_avg_pool,
    index,
    linear,
    mean,
    mul,
    relu,
    reshape,
    sigmoid,
    sub,
    sum,
    tanh,
    upsample_bilinear,
)
from .optim import SGD, Adam, MultiStepLR, OptimizerState
from .tensor import Tensor, as_tensor, backward

__all__ = [
    "Adam",
    "BatchNormState",
    "MultiStepLR",
    "OptimizerState",
    "SGD",
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "batchnorm",
    "conv2d",
    "cross_entropy",
    "custom",
    "elementwise",
    "global_avg_pool",
    "index",
    "linear",
    "mean",
    "mul",
    "relu",
    "reshape",
    "sigmoid",
    "sub",
    "sum",
    "tanh",
    "upsample_bilinear",
]
