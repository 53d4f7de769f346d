from mdg.autodiff.tensor import (
    Tensor,
    abs_,
    add,
    as_tensor,
    broadcast_to,
    concat,
    cos,
    custom,
    div,
    einsum,
    elementwise,
    exp,
    gelu,
    getitem,
    grad_enabled,
    layernorm,
    log,
    matmul,
    max_,
    mean,
    mul,
    neg,
    no_grad,
    pow_const,
    relu,
    reshape,
    sin,
    softmax_lastdim,
    sqrt,
    stack,
    sub,
    sum_,
    take,
    tanh,
    transpose,
    where,
    wrap_angle,
    wrap_angle_np,
)
from mdg.autodiff.checkpoint import load_tensors, save_tensors

__all__ = [
    "Tensor", "abs_", "add", "as_tensor", "broadcast_to", "concat", "cos", "custom", "div",
    "einsum", "elementwise", "exp", "gelu", "getitem", "grad_enabled", "layernorm", "log",
    "matmul", "max_", "mean", "mul", "neg", "no_grad", "pow_const", "relu", "reshape", "sin",
    "softmax_lastdim", "sqrt", "stack", "sub", "sum_", "take", "tanh", "transpose", "where",
    "wrap_angle", "wrap_angle_np", "load_tensors", "save_tensors",
]
