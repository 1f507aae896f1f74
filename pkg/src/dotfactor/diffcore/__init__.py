"""Minimal reverse-mode autodiff over numpy arrays, plus Adam."""

from .gradcheck import gradient_check, gradient_check_params
from .optim import Adam, AdamState, adam_step
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    bce_with_logits,
    clip,
    concat,
    current_tape,
    div,
    exp,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    relu,
    reshape,
    sigmoid,
    slice_,
    square,
    sub,
    tanh,
    tsum,
)

__all__ = [
    "Adam", "AdamState", "NonFiniteError", "ShapeError", "Tape", "Tensor",
    "adam_step", "add", "as_tensor", "backward", "bce_with_logits", "clip",
    "concat", "current_tape", "div", "exp", "gradient_check",
    "gradient_check_params", "log", "matmul", "mean", "mul", "neg", "no_grad",
    "relu", "reshape", "sigmoid", "slice_", "square", "sub", "tanh", "tsum",
]
