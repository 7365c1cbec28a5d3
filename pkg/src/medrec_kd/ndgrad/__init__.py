"""Minimal dense tensors with reverse-mode automatic differentiation."""

from .gradcheck import GradCheckReport, grad_check
from .ops import (
    add,
    attention_weights,
    bce_with_probs,
    clamp,
    concat,
    diagonal,
    dot,
    exp,
    ffn,
    l2_normalize,
    layer_norm,
    linear,
    log,
    logsumexp_rows,
    matmul,
    mean_all,
    mean_pool,
    mse,
    mul,
    multi_head_attention,
    relu,
    reshape,
    row_select,
    scale,
    sigmoid,
    softmax_rows,
    sub,
    sum_all,
    transpose,
)
from .tensor import NonFiniteError, ShapeError, Tape, TapeError, Tensor, as_tensor, backward

__all__ = [
    "GradCheckReport", "NonFiniteError", "ShapeError", "Tape", "TapeError", "Tensor",
    "add", "as_tensor", "attention_weights", "backward", "bce_with_probs", "clamp", "concat",
    "diagonal", "dot", "exp", "ffn", "grad_check", "l2_normalize", "layer_norm", "linear",
    "log", "logsumexp_rows", "matmul", "mean_all", "mean_pool", "mse", "mul",
    "multi_head_attention", "relu", "reshape", "row_select", "scale", "sigmoid", "softmax_rows", "sub",
    "sum_all", "transpose",
]
