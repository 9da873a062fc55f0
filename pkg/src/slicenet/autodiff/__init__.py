"""Minimal reverse-mode autodiff engine on top of numpy."""

from .functional import (
    conv2d,
    conv3d,
    conv_nd,
    instance_norm,
    linear,
    lstm_step,
    max_pool2d,
    max_pool3d,
    max_pool_nd,
    mse_loss,
    set_max,
    set_mean,
    set_weighted_sum,
    softmax,
)
from .optim import Adam, OptimState, clip_grad_norm, global_grad_norm
from .tensor import Tensor, canonical_sum, concat, no_grad, stack

__all__ = [
    "Adam", "OptimState", "Tensor", "canonical_sum", "clip_grad_norm", "concat", "conv2d",
    "conv3d", "conv_nd", "global_grad_norm", "instance_norm", "linear", "lstm_step",
    "max_pool2d", "max_pool3d", "max_pool_nd", "mse_loss", "no_grad", "set_max", "set_mean",
    "set_weighted_sum", "softmax", "stack",
]
