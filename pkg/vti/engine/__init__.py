"""Tensor engine: dense arrays with reverse-mode autodiff"""
from vti.engine.gradcheck import GradCheckReport, grad_check, grad_check_many
from vti.engine.tensor import (
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    broadcast_to,
    clamp,
    concat,
    default_dtype,
    dropout,
    elementwise_apply,
    exp,
    im2col,
    index,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    power,
    precision,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    sub,
    tanh,
    tensor_sum,
    transpose,
)

__all__ = [
    "Tensor", "Tape", "backward", "precision", "default_dtype", "as_tensor",
    "add", "sub", "mul", "scale", "tanh", "sigmoid", "relu", "exp", "log", "power",
    "clamp", "dropout", "elementwise_apply", "matmul", "transpose", "reshape",
    "broadcast_to", "tensor_sum", "mean", "concat", "index", "softmax", "log_softmax",
    "im2col", "grad_check", "grad_check_many", "GradCheckReport",
]
