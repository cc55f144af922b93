"""Minimal reverse-mode differentiation on numpy arrays."""
from . import ops
from .gradcheck import check_gradients, numeric_grad, relative_error
from .ops import (
    ShapeError,
    concat,
    conv2d,
    cross_entropy,
    dropout,
    gelu,
    layer_norm,
    linear,
    log_softmax,
    matmul,
    relu,
    softmax,
)
from .optim import AdamState, adam_step
from .tensor import GradientError, NonFiniteError, Tape, Tensor, as_tensor, backward, no_grad

__all__ = [
    "AdamState", "GradientError", "NonFiniteError", "ShapeError", "Tape", "Tensor",
    "adam_step", "as_tensor", "backward", "check_gradients", "concat", "conv2d",
    "cross_entropy", "dropout", "gelu", "layer_norm", "linear", "log_softmax", "matmul",
    "no_grad", "numeric_grad", "ops", "relative_error", "relu", "softmax",
]
