"""Reverse-mode differentiable computation on numpy arrays.

A small tape: every op builds a `Tensor` node holding its value and a
backward closure. Calling ``backward()`` on a scalar loss accumulates exact
gradients into every reachable parameter. Summation orders are fixed, so
identical inputs give bitwise identical outputs and gradients.
"""

from .tensor import Tensor, no_grad, grad_enabled, set_debug_checks
from .params import ParamStore
from .checkpoint import save_checkpoint, load_checkpoint
from .gradcheck import grad_check, grad_check_directions
from . import ops

__all__ = [
    "Tensor",
    "ParamStore",
    "no_grad",
    "grad_enabled",
    "set_debug_checks",
    "save_checkpoint",
    "load_checkpoint",
    "grad_check",
    "grad_check_directions",
    "ops",
]
