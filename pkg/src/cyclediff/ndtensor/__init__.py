"""Minimal n-d tensors with reverse-mode automatic differentiation."""
from . import ops
from .gradcheck import analytic_grad, check_gradients, numeric_grad, relative_error
from .ops import (
    abs, add, avg_pool, bce_with_logits, binary, clip, concat, conv2d, div, exp, group_norm,
    linear, log, matmul, mean, mul, nonlinear, pow, relu, reshape, sigmoid, silu, sqrt, sub,
    sum, upsample_nearest, as_tensor,
)
from .optim import AdamState, adam_step
from .rng import Rng, splitmix64
from .tensor import (
    Gradients, GradientTape, ShapeError, TapeError, Tensor, active_tape, default_dtype,
    no_grad, precision,
)

__all__ = [
    "Tensor", "GradientTape", "Gradients", "ShapeError", "TapeError", "no_grad", "precision",
    "active_tape", "default_dtype", "Rng", "splitmix64", "AdamState", "adam_step", "ops",
    "add", "sub", "mul", "div", "binary", "matmul", "linear", "conv2d", "reshape", "concat",
    "upsample_nearest", "relu", "silu", "sigmoid", "exp", "log", "abs", "pow", "sqrt", "clip",
    "sum", "mean", "avg_pool", "group_norm", "bce_with_logits", "nonlinear", "as_tensor",
    "check_gradients", "numeric_grad", "analytic_grad", "relative_error",
]
