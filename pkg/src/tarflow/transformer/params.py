import logging

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from tarflow.entities.config import HEAD_DIM, ModelConfig
from tarflow.errors import ParameterError
from tarflow.numerics import Tensor

logger = logging.getLogger(__name__)

INIT_STD = 0.02


def trunc_normal(
    rng: np.random.Generator,
    shape: tuple[int, ...],
    std: float = INIT_STD,
    dtype=np.float64,
) -> Tensor:
    """Normal(0, std²) resampled until every draw lies within 2·std."""
    values = rng.normal(0.0, std, size=shape)
    outside = np.abs(values) > 2 * std
    while np.any(outside):
        values[outside] = rng.normal(0.0, std, size=int(outside.sum()))
        outside = np.abs(values) > 2 * std
    return Tensor(values, dtype=dtype)


class _Params(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    def named_tensors(self, prefix: str = "") -> dict[str, Tensor]:
        named: dict[str, Tensor] = {}
        for name, value in self:
            key = f"{prefix}{name}"
            if isinstance(value, Tensor):
                named[key] = value
            elif isinstance(value, _Params):
                named.update(value.named_tensors(f"{key}."))
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    named.update(item.named_tensors(f"{key}.{i}."))
        return named

    def with_tensors(self, tensors: dict[str, Tensor], prefix: str = ""):
        """Copy with every tensor found under its dotted name replaced."""
        update = {}
        for name, value in self:
            key = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if key in tensors:
                    new = tensors[key]
                    if new.shape != value.shape:
                        raise ParameterError(
                            f"'{key}' expects shape {value.shape}, "
                            f"got {new.shape}"
                        )
                    update[name] = new
            elif isinstance(value, _Params):
                update[name] = value.with_tensors(tensors, f"{key}.")
            elif isinstance(value, list):
                update[name] = [
                    item.with_tensors(tensors, f"{key}.{i}.")
                    for i, item in enumerate(value)
                ]
        return self.model_copy(update=update)


class LayerParams(_Params):
    """One pre-norm attention layer followed by a GELU MLP."""

    ln1_gain: Tensor
    ln1_bias: Tensor
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    w_mlp_in: Tensor
    b_mlp_in: Tensor
    w_mlp_out: Tensor
    b_mlp_out: Tensor


class FlowBlockParams(_Params):
    in_proj_w: Tensor = Field(description="D x Ch input projection.")
    in_proj_b: Tensor
    start_emb: Tensor = Field(description="Occupies slot 0 of the input.")
    pos_emb: Tensor = Field(description="N x Ch position embeddings.")
    class_emb: Tensor | None = Field(
        default=None,
        description="(num_classes + 1) x Ch, last row is the null label.",
    )
    layers: list[LayerParams]
    ln_out_gain: Tensor
    ln_out_bias: Tensor
    mu_w: Tensor
    mu_b: Tensor
    alpha_w: Tensor
    alpha_b: Tensor

    @property
    def channels(self) -> int:
        return self.in_proj_w.shape[1]

    @property
    def num_positions(self) -> int:
        return self.pos_emb.shape[0]

    @property
    def patch_dim(self) -> int:
        return self.in_proj_w.shape[0]

    @property
    def num_heads(self) -> int:
        return self.channels // HEAD_DIM

    @property
    def dtype(self) -> np.dtype:
        return self.in_proj_w.dtype


def init_layer(
    channels: int, rng: np.random.Generator, dtype=np.float64
) -> LayerParams:
    hidden = 4 * channels

    def zeros(*shape: int) -> Tensor:
        return Tensor.zeros(shape, dtype=dtype)

    def ones(*shape: int) -> Tensor:
        return Tensor(np.ones(shape), dtype=dtype)

    def weight(*shape: int) -> Tensor:
        return trunc_normal(rng, shape, dtype=dtype)

    return LayerParams(
        ln1_gain=ones(channels),
        ln1_bias=zeros(channels),
        w_q=weight(channels, channels),
        b_q=zeros(channels),
        w_k=weight(channels, channels),
        b_k=zeros(channels),
        w_v=weight(channels, channels),
        b_v=zeros(channels),
        w_o=weight(channels, channels),
        b_o=zeros(channels),
        ln2_gain=ones(channels),
        ln2_bias=zeros(channels),
        w_mlp_in=weight(channels, hidden),
        b_mlp_in=zeros(hidden),
        w_mlp_out=weight(hidden, channels),
        b_mlp_out=zeros(channels),
    )


def init_block(
    config: ModelConfig,
    rng: np.random.Generator,
    head_std: float = 0.0,
) -> FlowBlockParams:
    """Fresh block parameters.

    Output heads are zero so the block starts as the identity. A positive
    `head_std` draws them from a truncated normal instead, which tests use
    to get a non-trivial transform without training.
    """
    dtype = config.dtype
    ch = config.channels
    grid = config.grid
    n, d = grid.num_patches, grid.patch_dim

    def head(*shape: int) -> Tensor:
        if head_std > 0:
            return trunc_normal(rng, shape, std=head_std, dtype=dtype)
        return Tensor.zeros(shape, dtype=dtype)

    class_emb = None
    if config.conditional:
        rows = config.num_classes + 1
        class_emb = trunc_normal(rng, (rows, ch), dtype=dtype)
    params = FlowBlockParams(
        in_proj_w=trunc_normal(rng, (d, ch), dtype=dtype),
        in_proj_b=Tensor.zeros((ch,), dtype=dtype),
        start_emb=trunc_normal(rng, (ch,), dtype=dtype),
        pos_emb=trunc_normal(rng, (n, ch), dtype=dtype),
        class_emb=class_emb,
        layers=[
            init_layer(ch, rng, dtype=dtype)
            for _ in range(config.layers_per_block)
        ],
        ln_out_gain=Tensor(np.ones(ch), dtype=dtype),
        ln_out_bias=Tensor.zeros((ch,), dtype=dtype),
        mu_w=head(ch, d),
        mu_b=head(d),
        alpha_w=head(ch, d),
        alpha_b=head(d),
    )
    logger.debug(
        f"initialised block N={n} D={d} Ch={ch} "
        f"K={config.layers_per_block} head_std={head_std}"
    )
    return params
