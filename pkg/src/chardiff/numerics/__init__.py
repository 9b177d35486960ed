"""Minimal tensor arithmetic, reverse-mode autodiff and AdamW."""
from . import functional
from .functional import ShapeError
from .gradcheck import check_gradients, numerical_grad, relative_error
from .optim import AdamW, OptimizerState, adamw_step
from .random import derive_seed, make_rng
from .tensor import (Tensor, as_tensor, default_dtype, grad_enabled, no_grad, parameter,
                     precision, set_default_dtype)

__all__ = [
    "AdamW", "OptimizerState", "ShapeError", "Tensor", "adamw_step", "as_tensor",
    "check_gradients", "default_dtype", "derive_seed", "functional", "grad_enabled",
    "make_rng", "no_grad", "numerical_grad", "parameter", "precision", "relative_error",
    "set_default_dtype",
]
