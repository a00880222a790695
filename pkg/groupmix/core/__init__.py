"""
Tensor core: values, tape-based autodiff, differentiable ops and the
finite-difference oracle.
"""
from .errors import (
    ConfigurationError,
    ContractError,
    DimensionError,
    DivergenceError,
    FormatError,
    GmxError,
)
from .gradcheck import GradCheckReport, check_gradients, grad_check
from .registry import registry
from .rng import make_rng
from .tensor import Function, Tape, TapeNode, Tensor, active_tape, backward, no_grad
from . import ops

__all__ = [
    "ConfigurationError",
    "ContractError",
    "DimensionError",
    "DivergenceError",
    "FormatError",
    "GmxError",
    "GradCheckReport",
    "check_gradients",
    "grad_check",
    "registry",
    "make_rng",
    "Function",
    "Tape",
    "TapeNode",
    "Tensor",
    "active_tape",
    "backward",
    "no_grad",
    "ops",
]
