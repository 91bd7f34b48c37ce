from .tape import Gradients, Tape, backward, current_tape
from .tensor import (
    Tensor,
    add,
    as_tensor,
    broadcast_to,
    cast,
    clip,
    concatenate,
    divide,
    exp,
    gelu,
    getitem,
    log,
    matmul,
    multiply,
    negative,
    power,
    reduce_mean,
    reduce_sum,
    reshape,
    softmax,
    subtract,
    take,
    tanh,
    transpose,
)

__all__ = [
    "Gradients",
    "Tape",
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "broadcast_to",
    "cast",
    "clip",
    "concatenate",
    "current_tape",
    "divide",
    "exp",
    "gelu",
    "getitem",
    "log",
    "matmul",
    "multiply",
    "negative",
    "power",
    "reduce_mean",
    "reduce_sum",
    "reshape",
    "softmax",
    "subtract",
    "take",
    "tanh",
    "transpose",
]
