"""Minimal reverse-mode automatic differentiation on numpy arrays."""
from . import functional
from .gradcheck import NondeterministicError, finite_difference_check
from .nn import Init, Module, Parameter
from .tensor import (
    GraphConsumedError,
    NonFiniteError,
    Tensor,
    as_tensor,
    is_debug,
    is_grad_enabled,
    no_grad,
    set_debug,
)

__all__ = [
    "functional",
    "finite_difference_check",
    "NondeterministicError",
    "Init",
    "Module",
    "Parameter",
    "GraphConsumedError",
    "NonFiniteError",
    "Tensor",
    "as_tensor",
    "is_debug",
    "is_grad_enabled",
    "no_grad",
    "set_debug",
]
