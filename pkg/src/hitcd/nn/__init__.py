"""Minimal numpy autodiff: tensors, layers, AdamW, cosine schedule, gradient checking."""
from . import ops
from .checkpoint import CheckpointError
from .gradcheck import GradCheckReport, finite_diff_check, generic_weights
from .module import LayerNorm, Linear, Module, trunc_normal, xavier_uniform
from .ops import ShapeError, gelu, layer_norm, linear, matmul, softmax
from .optim import AdamW, OptimizerState, adamw_step, cosine_lr
from .tensor import NonFiniteError, Parameter, Tensor, no_grad


def softmax_rows(x: Tensor) -> Tensor:
    return softmax(x, axis=-1)


def linear_forward(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return linear(x, w, b)


__all__ = [
    "AdamW", "CheckpointError", "GradCheckReport", "LayerNorm", "Linear", "Module",
    "NonFiniteError", "OptimizerState", "Parameter", "ShapeError", "Tensor",
    "adamw_step", "cosine_lr", "finite_diff_check", "gelu", "generic_weights", "layer_norm", "linear",
    "linear_forward", "matmul", "no_grad", "ops", "softmax", "softmax_rows", "trunc_normal", "xavier_uniform",
]
