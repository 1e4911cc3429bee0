"""Minimal reverse-mode automatic differentiation on float64 numpy arrays."""
from .container import read_container, write_container
from .ops import (add, batch_norm, broadcast_to, concat, gather, linear, log_softmax, matmul, mul, reduce_max,
                  reduce_mean, reduce_sum, relu, reshape, softmax, softmax_cross_entropy, sub,
                  transpose)
from .optim import OptimizerState, adam_step
from .tensor import NumericError, ShapeError, Tape, Tensor, as_tensor, backward

__all__ = [
    "Tensor", "Tape", "backward", "as_tensor", "ShapeError", "NumericError",
    "add", "broadcast_to", "sub", "mul", "matmul", "linear", "reshape", "transpose", "concat", "gather",
    "reduce_max", "reduce_sum", "reduce_mean", "relu", "softmax", "log_softmax",
    "softmax_cross_entropy", "batch_norm", "OptimizerState", "adam_step",
    "read_container", "write_container",
]
