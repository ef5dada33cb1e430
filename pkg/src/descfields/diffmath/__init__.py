from .adam import AdamState, adam_step, zero_grads
from .backend import HAVE_NATIVE, backends
from .gradcheck import grad_check
from .tensor import (
    Tape,
    Tensor,
    abs_,
    add,
    bce_with_logits,
    concat,
    conv3d,
    cosine_similarity,
    gather,
    linear,
    matmul,
    mean_,
    mul,
    neg,
    parameter,
    quat_rotate,
    relu,
    reshape,
    scatter_mean,
    set_debug,
    sqrt,
    square,
    sub,
    sum_,
)

__all__ = [
    "AdamState", "adam_step", "zero_grads", "HAVE_NATIVE", "backends", "grad_check",
    "Tape", "Tensor", "abs_", "add", "bce_with_logits", "concat", "conv3d",
    "cosine_similarity", "gather", "linear", "matmul", "mean_", "mul", "neg",
    "parameter", "quat_rotate", "relu", "reshape", "scatter_mean", "set_debug",
    "sqrt", "square", "sub", "sum_",
]
