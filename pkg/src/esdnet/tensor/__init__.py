from esdnet.tensor.tensor import (
    OpProfile,
    Tensor,
    add,
    as_tensor,
    concat,
    div,
    exp,
    is_grad_enabled,
    log,
    log_softmax,
    matmul,
    max_,
    mean,
    mul,
    no_grad,
    power,
    profile,
    relu,
    reshape,
    sigmoid,
    softmax,
    sqrt,
    stack_mean,
    sub,
    sum_,
    transpose,
)
from esdnet.tensor.functional import (
    avg_pool2d,
    batch_norm2d,
    conv2d,
    dropout,
    global_avg_pool,
    linear,
    max_pool2d,
)
from esdnet.tensor.optim import SgdState, sgd_step, step_lr, zero_grad

__all__ = [
    "OpProfile",
    "SgdState",
    "Tensor",
    "add",
    "as_tensor",
    "avg_pool2d",
    "batch_norm2d",
    "concat",
    "conv2d",
    "div",
    "dropout",
    "exp",
    "global_avg_pool",
    "is_grad_enabled",
    "linear",
    "log",
    "log_softmax",
    "matmul",
    "max_",
    "max_pool2d",
    "mean",
    "mul",
    "no_grad",
    "power",
    "profile",
    "relu",
    "reshape",
    "sgd_step",
    "sigmoid",
    "softmax",
    "sqrt",
    "stack_mean",
    "step_lr",
    "sub",
    "sum_",
    "transpose",
    "zero_grad",
]
