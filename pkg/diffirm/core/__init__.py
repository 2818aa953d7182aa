"""
Numeric substrate: tensors, reverse-mode autodiff, Adam, finite differences.
"""
from diffirm.core.tensor import (
    Tape,
    Tensor,
    activation,
    affine,
    backward,
    concat,
    elementwise,
    matmul,
    mse_loss,
    permute,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    scale,
    shift,
    sigmoid,
    square,
    stack,
    take,
    tanh,
    zero_grad,
)
from diffirm.core.optim import AdamState, adam_step, clip_global_norm, global_norm
from diffirm.core.gradcheck import (
    fresh_params,
    grad_check,
    grad_check_params,
    gradients,
    hessian_vector_product,
    squared_grad_norm_and_gradient,
)

__all__ = [
    "Tape", "Tensor", "activation", "affine", "backward", "concat", "elementwise",
    "matmul", "mse_loss", "permute", "reduce_mean", "reduce_sum", "relu", "reshape",
    "scale", "shift", "sigmoid", "square", "stack", "take", "tanh", "zero_grad",
    "AdamState", "adam_step", "clip_global_norm", "global_norm",
    "fresh_params", "grad_check", "grad_check_params", "gradients",
    "hessian_vector_product", "squared_grad_norm_and_gradient",
]
