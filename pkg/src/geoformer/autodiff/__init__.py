"""Small dense-tensor library with reverse-mode, twice-nestable autodiff."""

from .functional import geglu, layer_norm, linear, masked_softmax
from .tensor import (
    MAX_DEPTH,
    Tensor,
    add,
    as_tensor,
    broadcast_to,
    concat,
    div,
    embedding,
    erf,
    exp,
    gelu,
    getitem,
    grad,
    hadamard,
    is_grad_enabled,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    reciprocal,
    relu,
    reshape,
    sqrt,
    square,
    sub,
    sum_to,
    tabs,
    tensor,
    transpose,
    tsum,
    where,
)

__all__ = [
    "MAX_DEPTH", "Tensor", "add", "as_tensor", "broadcast_to", "concat", "div",
    "embedding", "erf", "exp", "geglu", "gelu", "getitem", "grad", "hadamard",
    "is_grad_enabled", "layer_norm", "linear", "log", "masked_softmax", "matmul",
    "mean", "mul", "neg", "no_grad", "power", "reciprocal", "relu", "reshape",
    "sqrt", "square", "sub", "sum_to", "tabs", "tensor", "transpose", "tsum", "where",
]
