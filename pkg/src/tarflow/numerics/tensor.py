"""Immutable dense real tensors and the differentiable primitives on them.

Layout is row-major; broadcasting aligns trailing dimensions and lets a
size-1 axis stretch. Every primitive is recorded on the active `Tape`
when one of its inputs is tracked, so gradients are available through
`tarflow.numerics.tape.backward`.
"""

import math
from typing import Any, Sequence

import numpy as np
import numpy.typing as npt

from tarflow.errors import DegenerateMaskError, DomainError, ShapeMismatchError

from .tape import Array, record

Scalar = int | float
Operand = "Tensor | Scalar | npt.ArrayLike"
Index = int | slice | None | type(Ellipsis) | tuple[Any, ...]

GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    """A real tensor of 32- or 64-bit floats.

    The wrapped array is read-only; every operation returns a new tensor.
    """

    __slots__ = ("data", "__weakref__")
    __array_ufunc__ = None

    def __init__(
        self,
        data: "npt.ArrayLike | Tensor",
        dtype: npt.DTypeLike | None = None,
    ):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        arr.flags.writeable = False
        self.data: Array = arr

    @classmethod
    def wrap(cls, arr: Array) -> "Tensor":
        """Wrap a freshly computed array without copying it."""
        arr = np.asarray(arr)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        arr.flags.writeable = False
        tensor = cls.__new__(cls)
        tensor.data = arr
        return tensor

    @classmethod
    def zeros(cls, shape: Sequence[int], dtype=np.float64) -> "Tensor":
        return cls.wrap(np.zeros(tuple(shape), dtype=dtype))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> Array:
        """A writable copy of the values."""
        return np.array(self.data)

    def detach(self) -> "Tensor":
        return Tensor.wrap(self.data)

    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return subtract(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return subtract(other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        return multiply(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return multiply(other, self)

    def __truediv__(self, other: Operand) -> "Tensor":
        return divide(self, other)

    def __rtruediv__(self, other: Operand) -> "Tensor":
        return divide(other, self)

    def __neg__(self) -> "Tensor":
        return negative(self)

    def __pow__(self, exponent: Scalar) -> "Tensor":
        return power(self, exponent)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __rmatmul__(self, other: Operand) -> "Tensor":
        return matmul(other, self)

    def __getitem__(self, index: Index) -> "Tensor":
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes if axes else None)

    def astype(self, dtype: npt.DTypeLike) -> "Tensor":
        return cast(self, dtype)


def as_tensor(value: Operand, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def _pair(a: Operand, b: Operand) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(op, a.shape, b.shape) from None


def unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum `grad` down to `shape`, undoing trailing-axis broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(
        i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1
    )
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    out = Tensor.wrap(a.data + b.data)
    return record(
        "add",
        out,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def subtract(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("subtract", a, b)
    out = Tensor.wrap(a.data - b.data)
    return record(
        "subtract",
        out,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    )


def multiply(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("multiply", a, b)
    out = Tensor.wrap(a.data * b.data)
    return record(
        "multiply",
        out,
        (a, b),
        lambda g: (
            unbroadcast(g * b.data, a.shape),
            unbroadcast(g * a.data, b.shape),
        ),
    )


def divide(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("divide", a, b)
    if np.any(b.data == 0):
        raise DomainError("divide: denominator contains zeros")
    out = Tensor.wrap(a.data / b.data)
    return record(
        "divide",
        out,
        (a, b),
        lambda g: (
            unbroadcast(g / b.data, a.shape),
            unbroadcast(-g * out.data / b.data, b.shape),
        ),
    )


def negative(a: Operand) -> Tensor:
    a = as_tensor(a)
    out = Tensor.wrap(-a.data)
    return record("negative", out, (a,), lambda g: (-g,))


def exp(a: Operand) -> Tensor:
    """Elementwise exp. Overflow yields inf instead of raising; callers
    that cannot tolerate it check the result."""
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = Tensor.wrap(np.exp(a.data))
    return record("exp", out, (a,), lambda g: (g * out.data,))


def log(a: Operand) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError(
            f"log: input has non-positive entries (min {a.data.min():.4g})"
        )
    out = Tensor.wrap(np.log(a.data))
    return record("log", out, (a,), lambda g: (g / a.data,))


def power(a: Operand, exponent: Scalar) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    if not p.is_integer() and np.any(a.data < 0):
        raise DomainError(f"power: negative base with exponent {p}")
    if p < 0 and np.any(a.data == 0):
        raise DomainError(f"power: zero base with exponent {p}")
    out = Tensor.wrap(np.power(a.data, a.dtype.type(p)))
    return record(
        "power",
        out,
        (a,),
        lambda g: (g * p * np.power(a.data, a.dtype.type(p - 1)),),
    )


def tanh(a: Operand) -> Tensor:
    a = as_tensor(a)
    out = Tensor.wrap(np.tanh(a.data))
    return record(
        "tanh", out, (a,), lambda g: (g * (1 - out.data * out.data),)
    )


def gelu(a: Operand) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    inner = GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = Tensor.wrap(0.5 * x * (1 + t))

    def _backward(g: Array) -> tuple[Array]:
        d_inner = GELU_C * (1 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * d_inner),)

    return record("gelu", out, (a,), _backward)


def clip(a: Operand, low: float, high: float) -> Tensor:
    a = as_tensor(a)
    out = Tensor.wrap(np.clip(a.data, low, high))
    inside = (a.data >= low) & (a.data <= high)
    return record("clip", out, (a,), lambda g: (g * inside,))


def cast(a: Operand, dtype: npt.DTypeLike) -> Tensor:
    a = as_tensor(a)
    if a.dtype == np.dtype(dtype):
        return a
    out = Tensor.wrap(a.data.astype(dtype))
    return record("cast", out, (a,), lambda g: (g.astype(a.dtype),))


def _swap_last(x: Array) -> Array:
    return np.swapaxes(x, -1, -2)


def matmul(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatchError("matmul", a.shape, b.shape) from None
    out = Tensor.wrap(np.matmul(a.data, b.data))
    return record(
        "matmul",
        out,
        (a, b),
        lambda g: (
            unbroadcast(np.matmul(g, _swap_last(b.data)), a.shape),
            unbroadcast(np.matmul(_swap_last(a.data), g), b.shape),
        ),
    )


def transpose(a: Operand, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(ax) % a.ndim for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeMismatchError("transpose", a.shape, axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor.wrap(np.transpose(a.data, axes))
    return record(
        "transpose", out, (a,), lambda g: (np.transpose(g, inverse),)
    )


def reshape(a: Operand, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = Tensor.wrap(a.data.reshape(tuple(shape)))
    except ValueError:
        raise ShapeMismatchError("reshape", a.shape, tuple(shape)) from None
    return record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def broadcast_to(a: Operand, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = Tensor.wrap(np.broadcast_to(a.data, tuple(shape)))
    except ValueError:
        raise ShapeMismatchError(
            "broadcast_to", a.shape, tuple(shape)
        ) from None
    return record(
        "broadcast_to", out, (a,), lambda g: (unbroadcast(g, a.shape),)
    )


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeMismatchError("concatenate")
    tensors = tuple(as_tensor(t) for t in tensors)
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        same_rank = t.ndim == ndim
        if not same_rank or any(
            t.shape[i] != tensors[0].shape[i]
            for i in range(ndim)
            if i != axis
        ):
            raise ShapeMismatchError(
                "concatenate", *(x.shape for x in tensors)
            )
    out = Tensor.wrap(np.concatenate([t.data for t in tensors], axis=axis))
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return record(
        "concatenate",
        out,
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def getitem(a: Operand, index: Index) -> Tensor:
    """Basic (view) indexing: integers, slices, Ellipsis and None."""
    a = as_tensor(a)
    out = Tensor.wrap(a.data[index])

    def _backward(g: Array) -> tuple[Array]:
        full = np.zeros(a.shape, dtype=a.dtype)
        full[index] = g
        return (full,)

    return record("getitem", out, (a,), _backward)


def take(table: Operand, indices: npt.ArrayLike) -> Tensor:
    """Gather rows of `table` (first axis) by integer index."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor.wrap(table.data[idx])

    def _backward(g: Array) -> tuple[Array]:
        full = np.zeros(table.shape, dtype=table.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return record("take", out, (table,), _backward)


def _normalize_axes(axis, ndim: int) -> tuple[int, ...] | None:
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(int(ax) % ndim for ax in axis))


def reduce_sum(a: Operand, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    out = Tensor.wrap(np.sum(a.data, axis=axes, keepdims=keepdims))

    def _backward(g: Array) -> tuple[Array]:
        if not keepdims:
            g = np.expand_dims(
                g, axes if axes is not None else tuple(range(a.ndim))
            )
        return (np.broadcast_to(g, a.shape).copy(),)

    return record("reduce_sum", out, (a,), _backward)


def reduce_mean(a: Operand, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = (
        a.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    )
    return reduce_sum(a, axis=axes, keepdims=keepdims) * (1.0 / count)


def softmax(
    logits: Operand, axis: int = -1, mask: npt.ArrayLike | None = None
) -> Tensor:
    """Numerically stable softmax along `axis`.

    `mask` (broadcastable boolean, True = keep) removes entries before
    normalization. A row with nothing left raises DegenerateMaskError.
    """
    logits = as_tensor(logits)
    x = logits.data
    if mask is not None:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        x = np.where(keep, x, -np.inf)
    if np.any(np.all(np.isneginf(x), axis=axis)):
        raise DegenerateMaskError(
            f"softmax: a row along axis {axis} is entirely masked"
        )
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor.wrap(y)
    return record(
        "softmax",
        out,
        (logits,),
        lambda g: (y * (g - np.sum(g * y, axis=axis, keepdims=True)),),
    )
