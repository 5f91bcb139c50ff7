"""Minimal dense tensor engine with reverse-mode differentiation."""
from .tensor import Tensor, backward, grad_enabled, no_grad
from . import functional
from .gradcheck import check_gradients, numeric_grad, relative_error

__all__ = ["Tensor", "backward", "no_grad", "grad_enabled", "functional",
           "check_gradients", "numeric_grad", "relative_error"]
