"""Guided predictions for the sequential inverse.

The guided prediction extrapolates the main stream away from a reference
stream. The reference is the null-label prediction (conditional mode) or
the same model run with perturbed attention temperature (unconditional
mode).
"""

from tarflow.entities.config import (
    GuidanceSchedule,
    GuidanceSpec,
    ScheduleNormalizer,
)
from tarflow.numerics import Tensor


def guided_prediction(
    mu_c: Tensor,
    alpha_c: Tensor,
    mu_ref: Tensor,
    alpha_ref: Tensor,
    weight: float,
) -> tuple[Tensor, Tensor]:
    """(1 + w)·c − w·ref, written as c + w·(c − ref) so that w = 0 and
    c = ref return c unchanged."""
    mu = mu_c + weight * (mu_c - mu_ref)
    alpha = alpha_c + weight * (alpha_c - alpha_ref)
    return mu, alpha


def guidance_weight_at(
    position: int,
    num_positions: int,
    spec: GuidanceSpec,
    num_blocks: int = 1,
) -> float:
    """Weight used when predicting sequence position `position` (1..N-1)."""
    if spec.schedule == GuidanceSchedule.UNIFORM:
        return spec.weight
    if spec.normalizer == ScheduleNormalizer.BLOCKS:
        denominator = max(num_blocks - 1, 1)
    else:
        denominator = max(num_positions - 1, 1)
    return spec.weight * position / denominator
