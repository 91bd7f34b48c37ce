import logging
import math

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from tarflow.errors import ShapeMismatchError
from tarflow.numerics import Tensor

logger = logging.getLogger(__name__)

Array = np.ndarray


class OptimizerState(BaseModel):
    """AdamW accumulators, keyed by parameter name."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    step: int = Field(default=0, ge=0)
    m: dict[str, Array] = Field(default_factory=dict)
    v: dict[str, Array] = Field(default_factory=dict)
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = Field(default=1e-4, ge=0)
    eps: float = Field(default=1e-8, gt=0)
    base_lr: float = Field(default=1e-4, gt=0)

    @classmethod
    def for_params(
        cls, params: dict[str, Tensor], **hyper
    ) -> "OptimizerState":
        return cls(
            m={k: np.zeros(t.shape, dtype=t.dtype) for k, t in params.items()},
            v={k: np.zeros(t.shape, dtype=t.dtype) for k, t in params.items()},
            **hyper,
        )


def lr_schedule(
    step: int,
    warmup_steps: int,
    total_steps: int,
    base_lr: float = 1e-4,
    min_lr: float = 1e-6,
) -> float:
    """Linear warmup min_lr→base_lr, then cosine decay back to min_lr."""
    if step < 0 or step > total_steps:
        clamped = min(max(step, 0), total_steps)
        logger.warning(
            f"[lr] step {step} outside [0, {total_steps}], using {clamped}"
        )
        step = clamped
    if step < warmup_steps:
        return min_lr + (base_lr - min_lr) * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return base_lr
    progress = (step - warmup_steps) / span
    return min_lr + (base_lr - min_lr) * (1 + math.cos(math.pi * progress)) / 2


def global_norm(grads: dict[str, Array]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_grad_norm(
    grads: dict[str, Array], max_norm: float | None
) -> tuple[dict[str, Array], float]:
    """Scale all gradients together so their global norm is ≤ max_norm."""
    norm = global_norm(grads)
    if max_norm is None or not math.isfinite(norm) or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, Array],
    state: OptimizerState,
    lr: float,
) -> dict[str, Tensor]:
    """One AdamW update with decoupled weight decay.

    `state` is updated in place. A step whose gradients are not all finite
    is skipped and leaves both parameters and state untouched.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None or g.shape != p.shape:
            raise ShapeMismatchError(
                f"adamw:{name}", p.shape, () if g is None else g.shape
            )
        if not np.all(np.isfinite(g)):
            logger.warning(
                f"[adamw:step {state.step}] non-finite gradient in "
                f"'{name}', skipping update"
            )
            return params
    beta1, beta2 = state.betas
    t = state.step + 1
    correction1 = 1 - beta1**t
    correction2 = 1 - beta2**t
    updated = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(p.shape, dtype=p.dtype)
            v = np.zeros(p.shape, dtype=p.dtype)
        value = p.numpy()
        value -= lr * state.weight_decay * value
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        value -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
        state.m[name] = m
        state.v[name] = v
        updated[name] = Tensor.wrap(value.astype(p.dtype, copy=False))
    state.step = t
    return updated
