"""Minimal reverse-mode tensor engine covering the Dual-CyCon layer set."""

from .tensor import Tensor
from .ops import (add, mul, neg, relu, sigmoid, reshape, total, concat, take,
                  global_avg_pool, scale_along_axis, conv2d, conv_output_size,
                  batchnorm2d, fully_connected, bce_loss, bce_with_logits,
                  bidirectional_kl)
from .optim import Adam, Param, adam_step
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint

__all__ = [
    "Tensor", "add", "mul", "neg", "relu", "sigmoid", "reshape", "total", "concat", "take",
    "global_avg_pool", "scale_along_axis", "conv2d", "conv_output_size", "batchnorm2d",
    "fully_connected", "bce_loss", "bce_with_logits", "bidirectional_kl",
    "Adam", "Param", "adam_step", "Checkpoint", "load_checkpoint", "save_checkpoint",
]
