from .ops import (
    BatchNormState,
    add,
    batchnorm,
    broadcast_to,
    concat,
    cross_entropy,
    dropout,
    gather_rows,
    leaky_relu,
    linear,
    log_softmax,
    matmul,
    max_over_axis,
    mean_over_axis,
    multiply,
    nll_loss,
    relu,
    reshape,
    subtract,
    sum_over_axis,
)
from .tensor import ShapeError, Tape, TapeError, Tensor, backward, current_tape, no_grad, record_op

__all__ = [
    "BatchNormState", "ShapeError", "Tape", "TapeError", "Tensor", "add", "backward", "batchnorm",
    "broadcast_to", "concat", "cross_entropy", "current_tape", "dropout", "gather_rows", "leaky_relu",
    "linear", "log_softmax", "matmul", "max_over_axis", "mean_over_axis", "multiply", "nll_loss",
    "no_grad", "record_op", "relu", "reshape", "subtract", "sum_over_axis",
]
