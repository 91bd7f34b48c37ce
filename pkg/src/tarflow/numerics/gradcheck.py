"""Finite-difference oracles shared by the test-suite and debugging."""

from typing import Callable, Iterable

import numpy as np

from .tape import Array


def central_difference(
    fn: Callable[[Array], float],
    x: Array,
    h: float = 1e-5,
    indices: Iterable[tuple[int, ...]] | None = None,
) -> Array:
    """Central-difference gradient of scalar `fn` at `x`.

    Only the entries in `indices` are estimated when given; the others
    are left at zero.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    targets = indices if indices is not None else np.ndindex(*x.shape)
    for idx in targets:
        original = x[idx]
        x[idx] = original + h
        upper = fn(x)
        x[idx] = original - h
        lower = fn(x)
        x[idx] = original
        grad[idx] = (upper - lower) / (2 * h)
    return grad


def jacobian(
    fn: Callable[[Array], Array], x: Array, h: float = 1e-5
) -> Array:
    """Central-difference Jacobian of a vector map, shape (out, in)."""
    x = np.array(x, dtype=np.float64).reshape(-1)
    columns = []
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = h
        upper = np.asarray(fn(x + step), dtype=np.float64).reshape(-1)
        lower = np.asarray(fn(x - step), dtype=np.float64).reshape(-1)
        columns.append((upper - lower) / (2 * h))
    return np.stack(columns, axis=1)


def relative_error(
    analytic: Array, numeric: Array, floor: float = 1e-5
) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))
