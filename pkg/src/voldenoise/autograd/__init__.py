"""Minimal dense-tensor engine with reverse-mode differentiation."""

from .gradcheck import GradCheckResult, grad_check
from .layers import (central_mask, channel_attention, conv3d, global_avg_pool, layer_norm,
                     linear, max_pool3d, simple_gate, upsample_linear)
from .optim import AdamState, adam_step
from .tensor import (Tensor, add, concat, crop_border, crop_start, forward_diff, leaky_relu,
                     mean_all, mul, no_grad, pad_end, pad_reflect, permutation, relu,
                     smooth_abs, sqrt, square, sub, sum_all, sum_channels)

__all__ = [
    "AdamState", "GradCheckResult", "Tensor", "adam_step", "add", "central_mask",
    "channel_attention", "concat", "conv3d", "crop_border", "crop_start", "forward_diff",
    "global_avg_pool", "grad_check", "layer_norm", "leaky_relu", "linear", "max_pool3d",
    "mean_all", "mul", "no_grad", "pad_end", "pad_reflect", "permutation", "relu",
    "simple_gate", "smooth_abs", "sqrt", "square", "sub", "sum_all", "sum_channels",
    "upsample_linear",
]
