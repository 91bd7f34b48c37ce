"""Causal transformer evaluation for one flow block.

The block reads its input sequence shifted one slot to the right: slot 0
holds a learned start embedding and slot i > 0 holds the projection of
sequence row i - 1. The output at slot i is therefore the (μ_i, α_i)
prediction for row i and depends on rows 0..i-1 only.
"""

import logging

import numpy as np
import numpy.typing as npt

from tarflow.entities.config import HEAD_DIM
from tarflow.errors import CacheFullError, ParameterError, ShapeMismatchError
from tarflow.numerics import (
    Tensor,
    broadcast_to,
    concatenate,
    gelu,
    power,
    reshape,
    take,
    transpose,
)

from .attention import attention_causal
from .params import FlowBlockParams, LayerParams

logger = logging.getLogger(__name__)

LN_EPS = 1e-6

Labels = int | npt.ArrayLike | None


def layer_norm(
    x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS
) -> Tensor:
    mean = x.mean(axis=-1, keepdims=True)
    centred = x - mean
    var = (centred * centred).mean(axis=-1, keepdims=True)
    return centred * power(var + eps, -0.5) * gain + bias


def resolve_labels(
    labels: Labels, batch: int, params: FlowBlockParams
) -> np.ndarray | None:
    """Per-example embedding rows, with None meaning the null label.

    Returns None for an unconditional block.
    """
    if params.class_emb is None:
        if labels is not None:
            raise ParameterError(
                "class label given to an unconditional model"
            )
        return None
    rows = params.class_emb.shape[0]
    if labels is None:
        return np.full(batch, rows - 1, dtype=np.int64)
    idx = np.asarray(labels, dtype=np.int64)
    if idx.ndim == 0:
        idx = np.full(batch, int(idx), dtype=np.int64)
    if idx.shape != (batch,):
        raise ShapeMismatchError("class labels", idx.shape, (batch,))
    if np.any(idx < 0) or np.any(idx >= rows):
        raise ParameterError(
            f"class label out of range [0, {rows - 1}]: "
            f"{idx[(idx < 0) | (idx >= rows)].tolist()}"
        )
    return idx


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, length, _ = x.shape
    return transpose(
        reshape(x, (b, length, heads, HEAD_DIM)), (0, 2, 1, 3)
    )


def _merge_heads(x: Tensor) -> Tensor:
    b, heads, length, _ = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, length, heads * HEAD_DIM))


def _mlp(h: Tensor, layer: LayerParams) -> Tensor:
    x = layer_norm(h, layer.ln2_gain, layer.ln2_bias)
    x = gelu(x @ layer.w_mlp_in + layer.b_mlp_in)
    return h + (x @ layer.w_mlp_out + layer.b_mlp_out)


def _heads(params: FlowBlockParams, h: Tensor) -> tuple[Tensor, Tensor]:
    x = layer_norm(h, params.ln_out_gain, params.ln_out_bias)
    mu = x @ params.mu_w + params.mu_b
    alpha = x @ params.alpha_w + params.alpha_b
    return mu, alpha


def _class_term(
    params: FlowBlockParams, rows: np.ndarray | None, batch: int
) -> Tensor | None:
    if rows is None:
        return None
    return reshape(take(params.class_emb, rows), (batch, 1, params.channels))


def embed(
    seq: Tensor, labels: Labels, params: FlowBlockParams
) -> Tensor:
    """(B, N, D) sequence to (B, N, Ch) shifted transformer input."""
    b, n, d = seq.shape
    if n != params.num_positions or d != params.patch_dim:
        raise ShapeMismatchError(
            "block_forward",
            seq.shape,
            (b, params.num_positions, params.patch_dim),
        )
    start = broadcast_to(
        reshape(params.start_emb, (1, 1, params.channels)),
        (b, 1, params.channels),
    )
    parts = [start]
    if n > 1:
        parts.append(seq[:, :-1, :] @ params.in_proj_w + params.in_proj_b)
    h = concatenate(parts, axis=1) + params.pos_emb
    cls = _class_term(params, resolve_labels(labels, b, params), b)
    if cls is not None:
        h = h + cls
    return h


def block_forward(
    seq: Tensor,
    labels: Labels,
    params: FlowBlockParams,
    temperature: float = 1.0,
) -> tuple[Tensor, Tensor]:
    """All N predictions (μ, α) in one causal pass.

    `seq` is (N, D) or (B, N, D); outputs match its rank.
    """
    unbatched = seq.ndim == 2
    if unbatched:
        seq = reshape(seq, (1, *seq.shape))
    if seq.ndim != 3:
        raise ShapeMismatchError("block_forward", seq.shape)
    h = embed(seq, labels, params)
    for layer in params.layers:
        x = layer_norm(h, layer.ln1_gain, layer.ln1_bias)
        q = _split_heads(x @ layer.w_q + layer.b_q, params.num_heads)
        k = _split_heads(x @ layer.w_k + layer.b_k, params.num_heads)
        v = _split_heads(x @ layer.w_v + layer.b_v, params.num_heads)
        attended = _merge_heads(attention_causal(q, k, v, temperature))
        h = h + (attended @ layer.w_o + layer.b_o)
        h = _mlp(h, layer)
    mu, alpha = _heads(params, h)
    if unbatched:
        mu, alpha = mu[0], alpha[0]
    return mu, alpha


class DecodeCache:
    """Keys and values of every layer for the slots decoded so far.

    Single consumer. `length` counts sequence tokens consumed, so a cache
    that has seen tokens 0..ℓ-1 has length ℓ and holds ℓ + 1 slots
    (the start slot included).
    """

    def __init__(
        self,
        num_layers: int,
        batch: int,
        num_positions: int,
        num_heads: int,
        dtype=np.float64,
    ):
        shape = (batch, num_heads, num_positions, HEAD_DIM)
        self.keys = [np.zeros(shape, dtype=dtype) for _ in range(num_layers)]
        self.values = [
            np.zeros(shape, dtype=dtype) for _ in range(num_layers)
        ]
        self.batch = batch
        self.num_positions = num_positions
        self.slots = 0

    @classmethod
    def for_block(
        cls, params: FlowBlockParams, batch: int = 1
    ) -> "DecodeCache":
        return cls(
            num_layers=len(params.layers),
            batch=batch,
            num_positions=params.num_positions,
            num_heads=params.num_heads,
            dtype=params.dtype,
        )

    @property
    def primed(self) -> bool:
        return self.slots > 0

    @property
    def length(self) -> int:
        return max(self.slots - 1, 0)

    @property
    def full(self) -> bool:
        return self.slots >= self.num_positions


def _decode_slot(
    cache: DecodeCache,
    h: Tensor,
    params: FlowBlockParams,
    temperature: float,
) -> tuple[Tensor, Tensor]:
    slot = cache.slots
    for i, layer in enumerate(params.layers):
        x = layer_norm(h, layer.ln1_gain, layer.ln1_bias)
        q = _split_heads(x @ layer.w_q + layer.b_q, params.num_heads)
        k = _split_heads(x @ layer.w_k + layer.b_k, params.num_heads)
        v = _split_heads(x @ layer.w_v + layer.b_v, params.num_heads)
        cache.keys[i][:, :, slot : slot + 1] = k.data
        cache.values[i][:, :, slot : slot + 1] = v.data
        keys = Tensor.wrap(cache.keys[i][:, :, : slot + 1])
        values = Tensor.wrap(cache.values[i][:, :, : slot + 1])
        attended = _merge_heads(
            attention_causal(q, keys, values, temperature, offset=slot)
        )
        h = h + (attended @ layer.w_o + layer.b_o)
        h = _mlp(h, layer)
    cache.slots += 1
    return _heads(params, h)


def _slot_input(
    params: FlowBlockParams,
    token: Tensor | None,
    slot: int,
    rows: np.ndarray | None,
    batch: int,
) -> Tensor:
    ch = params.channels
    if token is None:
        h = broadcast_to(reshape(params.start_emb, (1, 1, ch)), (batch, 1, ch))
    else:
        h = token @ params.in_proj_w + params.in_proj_b
    h = h + params.pos_emb[slot : slot + 1]
    cls = _class_term(params, rows, batch)
    if cls is not None:
        h = h + cls
    return h


def prime(
    cache: DecodeCache,
    labels: Labels,
    params: FlowBlockParams,
    temperature: float = 1.0,
) -> tuple[Tensor, Tensor]:
    """Decode the start slot. Returns the (unused) prediction for row 0."""
    if cache.primed:
        raise CacheFullError("cache is already primed")
    rows = resolve_labels(labels, cache.batch, params)
    h = _slot_input(params, None, 0, rows, cache.batch)
    return _decode_slot(cache, h, params, temperature)


def block_step(
    cache: DecodeCache,
    token: Tensor,
    labels: Labels,
    params: FlowBlockParams,
    temperature: float = 1.0,
) -> tuple[Tensor, Tensor]:
    """Consume sequence token ℓ = cache.length and predict row ℓ + 1.

    `token` is (B, D) or (D,) for a single lane. An unprimed cache is
    primed first. Returns (μ, α) shaped like `token`.
    """
    if not cache.primed:
        prime(cache, labels, params, temperature)
    if cache.full:
        raise CacheFullError(
            f"decode cache holds {cache.slots} of {cache.num_positions} "
            "slots, no position left to predict"
        )
    unbatched = token.ndim == 1
    b = cache.batch
    token = reshape(token.astype(params.dtype), (b, 1, params.patch_dim))
    rows = resolve_labels(labels, b, params)
    h = _slot_input(params, token, cache.slots, rows, b)
    mu, alpha = _decode_slot(cache, h, params, temperature)
    mu = reshape(mu, (b, params.patch_dim))
    alpha = reshape(alpha, (b, params.patch_dim))
    if unbatched:
        mu, alpha = mu[0], alpha[0]
    return mu, alpha
