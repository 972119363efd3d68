from .conv import conv2d, conv_transpose2d, pad2d, upsample_nearest
from .optim import AdamState, adam_step, poly_lr
from .rng import stream
from .tensor import (
    NonFiniteError,
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    bce_with_logits,
    concat,
    div,
    exp,
    gelu,
    getitem,
    layer_norm,
    log,
    matmul,
    mean,
    mul,
    neg,
    relu,
    reshape,
    sigmoid,
    softmax,
    square,
    stack,
    sub,
    tanh,
    transpose,
    tsum,
)

__all__ = [
    "AdamState", "NonFiniteError", "Tape", "Tensor", "adam_step", "add", "as_tensor",
    "backward", "bce_with_logits", "concat", "conv2d", "conv_transpose2d", "div", "exp",
    "gelu", "getitem", "layer_norm", "log", "matmul", "mean", "mul", "neg", "pad2d",
    "poly_lr", "relu", "reshape", "sigmoid", "softmax", "square", "stack", "stream", "sub",
    "tanh", "transpose", "tsum", "upsample_nearest",
]
