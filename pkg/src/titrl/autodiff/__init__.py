"""Minimal reverse-mode autodiff over numpy arrays."""
from titrl.autodiff.tensor import (
    Tape,
    Tensor,
    as_tensor,
    backward,
    clip,
    concat,
    default_dtype,
    exp,
    get_default_dtype,
    log,
    matmul,
    maximum,
    mean,
    minimum,
    no_grad,
    set_default_dtype,
    sqrt,
    stack,
    where,
)
from titrl.autodiff.functional import (
    ACTIVATIONS,
    activation,
    dropout,
    gelu,
    layer_norm,
    linear,
    log_softmax,
    masked_softmax,
    relu,
    tanh,
)
from titrl.autodiff.gradcheck import GradCheckReport, finite_difference_check, relative_error
from titrl.autodiff.module import Adam, Module, clip_grad_norm, init_linear, parameter

__all__ = [
    "ACTIVATIONS", "Adam", "GradCheckReport", "Module", "Tape", "Tensor", "activation", "as_tensor",
    "backward", "clip", "clip_grad_norm", "concat", "default_dtype", "dropout", "exp",
    "finite_difference_check", "gelu", "get_default_dtype", "init_linear", "layer_norm", "linear",
    "log", "log_softmax", "masked_softmax", "matmul", "maximum", "mean", "minimum", "no_grad",
    "parameter", "relative_error", "relu", "set_default_dtype", "sqrt", "stack", "tanh", "where",
]
