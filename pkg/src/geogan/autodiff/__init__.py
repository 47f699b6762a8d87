"""Reverse-mode automatic differentiation over numpy arrays."""
from . import functional
from .gradcheck import GradCheckReport, TensorCheck, check_primitives, finite_diff_check
from .nn import Conv2d, ConvTranspose2d, Module, Parameter
from .optim import Adam, AdamState, adam_step
from .tensor import (BACKWARD_RULES, Graph, Tensor, backward, is_debug, no_grad,
                     record_kinks, set_debug)

__all__ = [
    "Adam", "AdamState", "BACKWARD_RULES", "Conv2d", "ConvTranspose2d", "Graph",
    "GradCheckReport", "Module", "Parameter", "Tensor", "TensorCheck", "adam_step",
    "backward", "check_primitives", "finite_diff_check", "functional", "is_debug",
    "no_grad", "record_kinks", "set_debug",
]
