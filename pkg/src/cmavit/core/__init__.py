from cmavit.core.optim import AdamWState, adamw_step
from cmavit.core.tensor import (
    Graph,
    Tensor,
    add,
    backward,
    clip_grad_norm,
    concat,
    debug_checks,
    dropout,
    embedding,
    gelu,
    layer_norm,
    linear,
    matmul,
    mean,
    mul,
    no_grad,
    reshape,
    set_debug_checks,
    softmax_rows,
    sub,
    swap_last,
    transpose,
    tsum,
    zero_grads,
)

__all__ = [
    "AdamWState",
    "Graph",
    "Tensor",
    "adamw_step",
    "add",
    "backward",
    "clip_grad_norm",
    "concat",
    "debug_checks",
    "dropout",
    "embedding",
    "gelu",
    "layer_norm",
    "linear",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "reshape",
    "set_debug_checks",
    "softmax_rows",
    "sub",
    "swap_last",
    "transpose",
    "tsum",
    "zero_grads",
]
