import math
import threading

import numpy as np
from cachetools import LRUCache, cached

from tarflow.entities.config import HEAD_DIM
from tarflow.errors import ParameterError, ShapeMismatchError
from tarflow.numerics import Tensor, matmul, softmax, transpose

Array = np.ndarray


@cached(cache=LRUCache(maxsize=64), lock=threading.Lock())
def causal_mask(queries: int, keys: int, offset: int = 0) -> Array:
    """Boolean (queries, keys) mask, True where key j is visible to query i,
    i.e. j <= i + offset. `offset` is the absolute position of query 0."""
    rows = np.arange(queries)[:, None] + offset
    cols = np.arange(keys)[None, :]
    mask = cols <= rows
    mask.flags.writeable = False
    return mask


def attention_causal(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    temperature: float = 1.0,
    offset: int = 0,
) -> Tensor:
    """Masked scaled dot-product attention over (..., L, 64) heads.

    Logits are divided by τ·sqrt(64). With `offset` > 0 the queries are the
    tail of a longer sequence whose keys and values are all supplied, the
    shape used during incremental decoding.
    """
    if not temperature > 0:
        raise ParameterError(
            f"attention temperature must be positive, got {temperature}"
        )
    if k.shape != v.shape or q.shape[:-2] != k.shape[:-2]:
        raise ShapeMismatchError("attention", q.shape, k.shape, v.shape)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeMismatchError("attention", q.shape, k.shape)
    queries, keys = q.shape[-2], k.shape[-2]
    if offset == 0 and queries != keys:
        raise ShapeMismatchError("attention", q.shape, k.shape)
    scale = 1.0 / (temperature * math.sqrt(HEAD_DIM))
    axes = list(range(k.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    logits = matmul(q, transpose(k, axes)) * scale
    weights = softmax(logits, axis=-1, mask=causal_mask(queries, keys, offset))
    return matmul(weights, v)
