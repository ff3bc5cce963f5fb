from .tensor import (
    DimensionError,
    Tape,
    Tensor,
    Var,
    add,
    add_bias,
    bce_per_sample,
    concat_cols,
    detach,
    elementwise,
    gather_rows,
    loss_bce,
    loss_mse,
    loss_softmax_ce,
    matmul,
    mean_all,
    mul,
    pop_variance,
    relu,
    scale,
    sigmoid,
    softmax_ce_per_sample,
    softmax_rows,
    square,
    stack_scalars,
    sub,
    sum_all,
)
from .gradcheck import check_gradients, numeric_gradient

__all__ = [
    "DimensionError",
    "Tape",
    "Tensor",
    "Var",
    "add",
    "add_bias",
    "bce_per_sample",
    "check_gradients",
    "concat_cols",
    "detach",
    "elementwise",
    "gather_rows",
    "loss_bce",
    "loss_mse",
    "loss_softmax_ce",
    "matmul",
    "mean_all",
    "mul",
    "numeric_gradient",
    "pop_variance",
    "relu",
    "scale",
    "sigmoid",
    "softmax_ce_per_sample",
    "softmax_rows",
    "square",
    "stack_scalars",
    "sub",
    "sum_all",
]
