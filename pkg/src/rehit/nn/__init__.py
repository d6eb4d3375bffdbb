"""Minimal NCHW tensor kernel with tape-based reverse-mode gradients."""

from . import ops
from .gradcheck import grad_check, grad_check_detail
from .module import Conv2d, LayerNorm2d, Module, randomize_
from .ops import ShapeError
from .permute import Permutation, argsort_stable, permute_apply
from .tensor import (FlopCounter, Parameter, Tape, Tensor, get_dtype, get_mode, no_tape,
                     numeric_mode, override_rule, set_mode, frozen_branches)

__all__ = [
    "ops", "grad_check", "grad_check_detail", "Conv2d", "LayerNorm2d", "Module", "randomize_",
    "ShapeError", "Permutation", "argsort_stable", "permute_apply", "FlopCounter", "Parameter",
    "Tape", "Tensor", "get_dtype", "get_mode", "no_tape", "numeric_mode", "override_rule",
    "set_mode", "frozen_branches",
]
