"""Minimal reverse-mode autodiff over numpy arrays, layer ops and Adam."""

from .nn import (avg_pool, conv2d, group_norm, linear, matmul_attention, max_pool,
                 pool_and_resize, softmax, softmax_channel, upsample_nearest)
from .optim import Adam, AdamState, adam_step
from .tensor import (DTYPE, Tensor, absolute, add, as_tensor, concat, div, elementwise, exp,
                     is_grad_enabled, log, matmul, mean, mul, neg, no_grad, power, relu,
                     reshape, silu, sqrt, sub, swapaxes, transpose, tsum)

__all__ = [
    "DTYPE", "Tensor", "no_grad", "is_grad_enabled", "elementwise",
    "add", "sub", "mul", "div", "neg", "exp", "log", "sqrt", "power", "relu", "silu",
    "absolute", "tsum", "mean", "reshape", "transpose", "swapaxes", "concat", "matmul",
    "as_tensor", "conv2d", "max_pool", "avg_pool", "upsample_nearest", "pool_and_resize",
    "group_norm", "softmax", "softmax_channel", "matmul_attention", "linear",
    "Adam", "AdamState", "adam_step",
]
