"""Reverse-mode automatic differentiation over dense numpy arrays."""
from . import ops
from .gradcheck import analytic_grad, finite_diff_check, numeric_grad, relative_error
from .nn import Conv2d, Linear, Module
from .tensor import GradientTape, Tensor, as_tensor, backward, current_tape, get_dtype, precision

__all__ = [
    "ops", "Tensor", "GradientTape", "backward", "precision", "get_dtype", "as_tensor",
    "current_tape", "finite_diff_check", "analytic_grad", "numeric_grad", "relative_error",
    "Module", "Conv2d", "Linear",
]
