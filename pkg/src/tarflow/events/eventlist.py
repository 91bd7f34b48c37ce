from pydantic import Field

from tarflow.repositories.checkpoint_repository import Checkpoint
from utils.events.base import BaseEvent


class StepCompletedEvent(BaseEvent):
    """Fires after every optimizer step. One row of the loss curve."""

    topic: str = Field("training.step_completed", frozen=True)
    step: int
    lr: float
    loss_nats: float = Field(description="Batch loss, nats per example.")
    seconds: float = Field(description="Wall time since training started.")


class EpochCompletedEvent(BaseEvent):
    """Fires at every checkpoint-cadence epoch boundary."""

    topic: str = Field("training.epoch_completed", frozen=True)
    epoch: int
    mean_loss: float
    checkpoint: Checkpoint


class BestLossEvent(BaseEvent):
    """Fires when an epoch's mean loss improves on every earlier one."""

    topic: str = Field("training.best_loss", frozen=True)
    epoch: int
    mean_loss: float
    checkpoint: Checkpoint
