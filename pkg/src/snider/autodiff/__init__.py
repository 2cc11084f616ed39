"""A small NCHW tensor library with tape-based reverse-mode differentiation."""

from .functional import (
    BatchNormState,
    add,
    batchnorm2d,
    bce_loss,
    concat_channels,
    conv2d,
    conv_transpose2d,
    l1_loss,
    leaky_relu,
    maxpool2x2,
    mse_loss,
    reshape,
    scale,
    sigmoid,
    slice_channels,
    total,
    upsample_nearest2x,
    weighted_sum,
)
from .optim import adam_step, clip_gradients, global_grad_norm, zero_grad
from .tensor import Parameter, ShapeError, Tape, Tensor, backward, default_dtype, precision

__all__ = [
    "BatchNormState",
    "Parameter",
    "ShapeError",
    "Tape",
    "Tensor",
    "adam_step",
    "add",
    "backward",
    "batchnorm2d",
    "bce_loss",
    "clip_gradients",
    "concat_channels",
    "conv2d",
    "conv_transpose2d",
    "default_dtype",
    "global_grad_norm",
    "l1_loss",
    "leaky_relu",
    "maxpool2x2",
    "mse_loss",
    "precision",
    "reshape",
    "scale",
    "sigmoid",
    "slice_channels",
    "total",
    "upsample_nearest2x",
    "weighted_sum",
    "zero_grad",
]
