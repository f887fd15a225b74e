"""Dense tensors, reverse-mode autodiff and Adam."""

from .gradcheck import GradCheckReport, grad_check, numerical_grad
from .optim import OptimizerState, adam_step
from .tensor import (
    ShapeError,
    Tensor,
    add,
    backward,
    concat,
    gather,
    gelu,
    layer_norm,
    matmul,
    mean,
    mse,
    mul,
    no_grad,
    reshape,
    scale,
    softmax,
    sub,
    total,
    transpose,
)

forward_backward = backward

__all__ = [
    "GradCheckReport",
    "OptimizerState",
    "ShapeError",
    "Tensor",
    "adam_step",
    "add",
    "backward",
    "concat",
    "forward_backward",
    "gather",
    "gelu",
    "grad_check",
    "layer_norm",
    "matmul",
    "mean",
    "mse",
    "mul",
    "no_grad",
    "numerical_grad",
    "reshape",
    "scale",
    "softmax",
    "sub",
    "total",
    "transpose",
]
