from .attention import attention_causal, causal_mask
from .block import (
    DecodeCache,
    block_forward,
    block_step,
    layer_norm,
    prime,
    resolve_labels,
)
from .params import FlowBlockParams, LayerParams, init_block

__all__ = [
    "DecodeCache",
    "FlowBlockParams",
    "LayerParams",
    "attention_causal",
    "block_forward",
    "block_step",
    "causal_mask",
    "init_block",
    "layer_norm",
    "prime",
    "resolve_labels",
]
