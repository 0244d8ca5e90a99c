"""Minimal dense tensors with reverse-mode differentiation."""
from .gradcheck import GradcheckReport, gradcheck, rel_err
from .ops import (
    add, affine, as_tensor, concat, cross_entropy, gelu, getitem, layer_norm, mean_pool,
    mor_linear, mul, reshape, scale, self_attention, softmax, sub,
)
from .ops import sum as sum_all
from .tensor import (
    NumericError, ShapeError, Tape, Tensor, active_tape, get_dtype, inject_backward_fault,
    no_tape, precision, set_precision,
)

__all__ = [
    "GradcheckReport", "NumericError", "ShapeError", "Tape", "Tensor", "active_tape", "add",
    "affine", "as_tensor", "concat", "cross_entropy", "gelu", "get_dtype", "getitem",
    "gradcheck", "inject_backward_fault", "layer_norm", "mean_pool", "mor_linear", "mul",
    "no_tape", "precision", "rel_err", "reshape", "scale", "self_attention", "set_precision",
    "softmax", "sub", "sum_all",
]
