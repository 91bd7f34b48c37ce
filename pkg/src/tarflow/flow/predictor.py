import abc
from typing import Any

import numpy as np

from tarflow.numerics import Tensor, as_tensor
from tarflow.transformer import (
    DecodeCache,
    FlowBlockParams,
    block_forward,
    block_step,
)
from tarflow.transformer.block import Labels


class CausalPredictor(abc.ABC):
    """Produces the (μ, α) sequences of one flow block.

    Row i of each output may depend on input rows 0..i-1 only.
    """

    @abc.abstractmethod
    def predict(
        self, seq: Tensor, labels: Labels, temperature: float = 1.0
    ) -> tuple[Tensor, Tensor]:
        """(B, N, D) sequence to (B, N, D) μ and α."""
        raise NotImplementedError

    def new_cache(self, batch: int) -> Any:
        return _PrefixCache()

    def step(
        self,
        cache: Any,
        token: Tensor,
        labels: Labels,
        temperature: float = 1.0,
    ) -> tuple[Tensor, Tensor]:
        """Consume the next (B, D) token and return the (B, D) prediction
        for the position after it.

        The default recomputes `predict` over the prefix.
        """
        cache.tokens.append(np.asarray(as_tensor(token).data))
        prefix = np.stack(cache.tokens, axis=1)
        b, length, d = prefix.shape
        seq = np.concatenate([prefix, np.zeros((b, 1, d))], axis=1)
        mu, alpha = self.predict(Tensor(seq), labels, temperature)
        return mu[:, length], alpha[:, length]


class _PrefixCache:
    def __init__(self) -> None:
        self.tokens: list[np.ndarray] = []

    @property
    def length(self) -> int:
        return len(self.tokens)


class TransformerPredictor(CausalPredictor):
    def __init__(self, params: FlowBlockParams):
        self.params = params

    def predict(
        self, seq: Tensor, labels: Labels, temperature: float = 1.0
    ) -> tuple[Tensor, Tensor]:
        return block_forward(seq, labels, self.params, temperature)

    def new_cache(self, batch: int) -> DecodeCache:
        return DecodeCache.for_block(self.params, batch)

    def step(
        self,
        cache: DecodeCache,
        token: Tensor,
        labels: Labels,
        temperature: float = 1.0,
    ) -> tuple[Tensor, Tensor]:
        return block_step(cache, token, labels, self.params, temperature)
