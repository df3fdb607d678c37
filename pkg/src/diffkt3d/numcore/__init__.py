"""Minimal float64 tensor arithmetic with reverse-mode gradients."""

from . import ops
from .gradcheck import grad_check, numerical_gradient
from .rng import stream
from .tensor import GradTape, ShapeError, Tensor, as_tensor, evaluate_with_gradients

__all__ = [
    "GradTape",
    "ShapeError",
    "Tensor",
    "as_tensor",
    "evaluate_with_gradients",
    "grad_check",
    "numerical_gradient",
    "ops",
    "stream",
]
