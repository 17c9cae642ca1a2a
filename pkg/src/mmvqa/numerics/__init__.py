"""Minimal dense-tensor algebra with reverse-mode differentiation."""
from . import ops
from .gradcheck import grad_check
from .ops import (
    IGNORE_INDEX,
    add,
    add_bias,
    concat,
    conv2d,
    cross_entropy,
    dropout,
    embedding,
    gelu,
    global_avg_pool,
    layer_norm,
    linear,
    masked_mean,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    scale,
    slice_axis,
    softmax,
    sub,
    take_rows,
    transpose,
)
from .ops import sum as sum_  # noqa: F401
from .tensor import Tape, Tensor, active_tape, no_grad


def backward(tape, loss):
    """Populate gradients of every leaf recorded on ``tape``."""
    tape.backward(loss)


__all__ = [
    "IGNORE_INDEX", "Tape", "Tensor", "active_tape", "add", "add_bias", "backward", "concat", "conv2d",
    "cross_entropy", "dropout", "embedding", "gelu", "global_avg_pool", "grad_check", "layer_norm", "linear",
    "masked_mean", "matmul", "mean", "mul", "no_grad", "ops", "relu", "reshape", "scale", "slice_axis",
    "softmax", "sub", "sum_", "take_rows", "transpose",
]
