import logging

import numpy as np

from tarflow.errors import NonFiniteLossError, NumericalRangeError
from tarflow.flow.model import TarFlowModel
from tarflow.numerics import Tensor, Tape, backward, cast, exp
from tarflow.transformer.block import Labels

logger = logging.getLogger(__name__)


def nvp_loss(
    model: TarFlowModel,
    batch: Tensor,
    labels: Labels = None,
    step: int = 0,
) -> Tensor:
    """Mean over the batch of 0.5·‖z_T‖² − log|det|, in nats.

    This is −mean log_prob without the (N·D/2)·ln 2π constant. In VP mode
    the learned prior variance enters the quadratic term.
    """
    try:
        z, logdet = model.forward(batch, labels)
        z = cast(z, np.float64)
        if model.prior_log_var is None:
            quad = (z * z).sum(axis=(1, 2))
        else:
            log_var = cast(model.prior_log_var, np.float64)
            quad = (z * z * exp(-log_var) + log_var).sum(axis=(1, 2))
        loss = (0.5 * quad - logdet).mean()
    except NumericalRangeError as err:
        raise _non_finite(model, batch, labels, step) from err
    if not np.isfinite(loss.item()):
        raise _non_finite(model, batch, labels, step)
    return loss


def _non_finite(
    model: TarFlowModel, batch: Tensor, labels: Labels, step: int
) -> NonFiniteLossError:
    report = model.diagnose(batch, labels)
    for entry in report:
        logger.error(f"[step:{step}] {entry.model_dump()}")
    return NonFiniteLossError(
        step,
        max(entry.max_abs_alpha for entry in report),
        max(entry.max_abs_z for entry in report),
    )


def loss_and_grads(
    model: TarFlowModel,
    batch: Tensor,
    labels: Labels = None,
    step: int = 0,
) -> tuple[float, dict[str, np.ndarray]]:
    """The loss value and its gradient for every named parameter."""
    params = model.named_tensors()
    with Tape() as tape:
        tape.watch(*params.values())
        loss = nvp_loss(model, batch, labels, step)
    grads = backward(tape, loss)
    return loss.item(), {name: grads[t] for name, t in params.items()}
