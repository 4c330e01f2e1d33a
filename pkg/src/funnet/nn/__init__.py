"""Minimal dense-tensor engine with reverse-mode differentiation."""

from funnet.nn.functional import (
    batchnorm2d,
    conv2d,
    global_avg_pool,
    linear,
    relu,
    sigmoid,
    softmax_cross_entropy,
    squeeze_excite,
    stochastic_depth,
    swish,
)
from funnet.nn.module import BatchNorm2d, Conv2d, Linear, Module, SqueezeExcite
from funnet.nn.optim import Optimizer, OptimizerState, lr_schedule, rmsprop, sgd, step_schedule
from funnet.nn.tensor import Parameter, Tensor, no_grad

__all__ = [
    "BatchNorm2d", "Conv2d", "Linear", "Module", "Optimizer", "OptimizerState",
    "Parameter", "SqueezeExcite", "Tensor", "batchnorm2d", "conv2d",
    "global_avg_pool", "linear", "lr_schedule", "no_grad", "relu", "rmsprop",
    "sgd", "sigmoid", "softmax_cross_entropy", "squeeze_excite",
    "stochastic_depth", "step_schedule", "swish",
]
