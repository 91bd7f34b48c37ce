"""Reverse-mode differentiation over an explicitly recorded tape.

A `Tape` is a thread-local recording context. While one is active, every
primitive op whose inputs include a watched (or previously recorded)
tensor appends a record to it. `backward` replays those records in
reverse order, which is a reverse topological order because records are
appended in execution order.
"""

import logging
import threading
from typing import TYPE_CHECKING, Any, Callable, Iterator, Mapping, NamedTuple

import numpy as np
import numpy.typing as npt

from tarflow.errors import GradientError

if TYPE_CHECKING:
    from tarflow.numerics.tensor import Tensor

logger = logging.getLogger(__name__)

Array = npt.NDArray[Any]
BackwardFn = Callable[[Array], tuple[Array | None, ...]]

_local = threading.local()


def _stack() -> list["Tape"]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = []
        _local.tapes = stack
    return stack


def current_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


class Record(NamedTuple):
    op: str
    output: "Tensor"
    inputs: tuple["Tensor", ...]
    backward: BackwardFn


class Tape:
    """Ordered record of primitive operations.

    Usage::

        with Tape() as tape:
            tape.watch(w)
            loss = ((x @ w) * (x @ w)).sum()
        grads = backward(tape, loss)
        grads[w]
    """

    def __init__(self) -> None:
        self.records: list[Record] = []
        self.seed: "Tensor | None" = None
        self._leaves: dict[int, "Tensor"] = {}
        self._tracked: set[int] = set()

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc_value, traceback) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()
        return None

    def __len__(self) -> int:
        return len(self.records)

    def watch(self, *tensors: "Tensor") -> None:
        for tensor in tensors:
            self._leaves[id(tensor)] = tensor
            self._tracked.add(id(tensor))

    @property
    def leaves(self) -> list["Tensor"]:
        return list(self._leaves.values())

    def is_tracked(self, tensor: "Tensor") -> bool:
        return id(tensor) in self._tracked

    def record(
        self,
        op: str,
        output: "Tensor",
        inputs: tuple["Tensor", ...],
        backward_fn: BackwardFn,
    ) -> None:
        self.records.append(Record(op, output, inputs, backward_fn))
        self._tracked.add(id(output))


def record(
    op: str,
    output: "Tensor",
    inputs: tuple["Tensor", ...],
    backward_fn: BackwardFn,
) -> "Tensor":
    """Append `output = op(inputs)` to the active tape when any input is
    tracked by it. Returns `output` unchanged."""
    tape = current_tape()
    if tape is not None and any(tape.is_tracked(t) for t in inputs):
        tape.record(op, output, inputs, backward_fn)
    return output


class Gradients(Mapping["Tensor", Array]):
    """Gradient of the seed with respect to every watched leaf.

    Looking up a tensor that never reached the seed (or was never
    watched) yields zeros shaped like it.
    """

    def __init__(
        self, leaves: dict[int, "Tensor"], values: dict[int, Array]
    ) -> None:
        self._leaves = leaves
        self._values = values

    def __getitem__(self, tensor: "Tensor") -> Array:
        value = self._values.get(id(tensor))
        if value is None:
            return np.zeros(tensor.shape, dtype=tensor.dtype)
        return value

    def __contains__(self, tensor: object) -> bool:
        return id(tensor) in self._leaves

    def __iter__(self) -> Iterator["Tensor"]:
        return iter(self._leaves.values())

    def __len__(self) -> int:
        return len(self._leaves)


def backward(tape: Tape, output: "Tensor") -> Gradients:
    """Return d(output)/d(leaf) for every leaf watched on `tape`."""
    if output.size != 1:
        raise GradientError(
            f"backward needs a scalar seed, got shape {output.shape}"
        )
    grads: dict[int, Array] = {}
    if tape.is_tracked(output):
        tape.seed = output
        grads[id(output)] = np.ones(output.shape, dtype=output.dtype)
        for rec in reversed(tape.records):
            upstream = grads.pop(id(rec.output), None)
            if upstream is None:
                continue
            for inp, grad in zip(rec.inputs, rec.backward(upstream)):
                if grad is None or not tape.is_tracked(inp):
                    continue
                if grad.shape != inp.shape:
                    raise GradientError(
                        f"[{rec.op}] gradient shape {grad.shape} does not "
                        f"match input shape {inp.shape}"
                    )
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = np.asarray(grad, dtype=inp.dtype)
    else:
        logger.debug("backward seed is not on the tape, gradients are zero")
    leaf_values = {key: grads[key] for key in tape._leaves if key in grads}
    return Gradients(dict(tape._leaves), leaf_values)
