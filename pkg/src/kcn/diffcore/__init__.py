"""Minimal reverse-mode differentiation on numpy arrays."""
from . import ops
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .graph import ComputeGraph, GradCheckResult, finite_diff_check, relative_error
from .linalg import NotPositiveDefiniteError, cholesky, jittered_cholesky, solve_triangular
from .nn import Adam, Conv2d, Linear, Module, parameter
from .tensor import (
    ShapeError,
    Tensor,
    backward,
    default_dtype,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    set_default_dtype,
)

__all__ = [
    "Adam", "CheckpointError", "ComputeGraph", "Conv2d", "GradCheckResult", "Linear", "Module",
    "NotPositiveDefiniteError", "ShapeError", "Tensor", "backward", "cholesky", "default_dtype",
    "finite_diff_check", "get_default_dtype", "is_grad_enabled", "jittered_cholesky", "load_checkpoint",
    "no_grad", "ops", "parameter", "relative_error", "save_checkpoint", "set_default_dtype",
    "solve_triangular",
]
