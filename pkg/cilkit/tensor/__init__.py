from .optim import SGDMomentum, cosine_lr, sgd_momentum_step
from .tensor import (
    Tensor,
    absolute,
    add,
    as_tensor,
    backward,
    broadcast_to,
    concat,
    cross_entropy,
    div,
    exp,
    is_grad_enabled,
    l1_norm,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    numerical_gradient,
    relu,
    reshape,
    scaled_dot_product_attention,
    select,
    softmax,
    sub,
    swap_last,
    tensor_sum,
    transpose,
)

__all__ = [
    "Tensor",
    "SGDMomentum",
    "absolute",
    "add",
    "as_tensor",
    "backward",
    "broadcast_to",
    "concat",
    "cosine_lr",
    "cross_entropy",
    "div",
    "exp",
    "is_grad_enabled",
    "l1_norm",
    "layer_norm",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "numerical_gradient",
    "relu",
    "reshape",
    "scaled_dot_product_attention",
    "select",
    "sgd_momentum_step",
    "softmax",
    "sub",
    "swap_last",
    "tensor_sum",
    "transpose",
]
