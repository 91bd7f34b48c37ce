"""Subscribers to training events: the loss-curve CSV and checkpoint
writes."""

import logging
from pathlib import Path

import pandas as pd

from tarflow.repositories.checkpoint_repository import (
    AbstractCheckpointRepository,
)
from utils.events.base import BaseEvent
from utils.events.local import LocalPublisher, LocalSubscriber
from utils.logger import CustomLoggingAdapter

from .eventlist import BestLossEvent, EpochCompletedEvent, StepCompletedEvent

LOSS_COLUMNS = ["step", "lr", "loss_nats", "seconds"]


class LossCurveSubscriber(LocalSubscriber):
    """Buffers step records and appends them to a CSV file at every
    epoch boundary.

    When resuming, rows past `start_step` left by an interrupted run are
    dropped first.
    """

    _supported_topics: list[str] = [
        "training.step_completed",
        "training.epoch_completed",
    ]

    def __init__(
        self, publisher: LocalPublisher, path: Path, start_step: int = 0
    ):
        super().__init__(publisher)
        self._logger = CustomLoggingAdapter(
            logging.getLogger(__name__), {"ctx": "LossCurve"}
        )
        self.path = Path(path)
        self.rows: list[dict[str, float]] = []
        if self.path.exists():
            existing = pd.read_csv(self.path)
            if start_step == 0:
                self.path.unlink()
            elif (existing["step"] > start_step).any():
                kept = existing[existing["step"] <= start_step]
                kept.to_csv(self.path, index=False)
                self._logger.info(
                    f"truncated {self.path} to step {start_step}"
                )

    @property
    def supported_topics(self) -> list[str]:
        return self._supported_topics

    def handle(self, event: BaseEvent) -> None:
        if isinstance(event, StepCompletedEvent):
            self.rows.append(event.model_dump(include=set(LOSS_COLUMNS)))
        elif isinstance(event, EpochCompletedEvent):
            self.flush()

    def flush(self) -> None:
        if not self.rows:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        frame = pd.DataFrame(self.rows, columns=LOSS_COLUMNS)
        frame.to_csv(
            self.path, mode="a", header=not self.path.exists(), index=False
        )
        self._logger.debug(f"appended {len(frame)} rows to {self.path}")
        self.rows = []

    def read(self) -> pd.DataFrame:
        self.flush()
        return pd.read_csv(self.path)


class CheckpointSubscriber(LocalSubscriber):
    """Saves `epoch-XXXX` checkpoints and keeps `best` current."""

    _supported_topics: list[str] = [
        "training.epoch_completed",
        "training.best_loss",
    ]

    def __init__(
        self,
        publisher: LocalPublisher,
        repository: AbstractCheckpointRepository,
    ):
        super().__init__(publisher)
        self._logger = CustomLoggingAdapter(
            logging.getLogger(__name__), {"ctx": "Checkpoints"}
        )
        self.repository = repository

    @property
    def supported_topics(self) -> list[str]:
        return self._supported_topics

    def handle(self, event: BaseEvent) -> None:
        if isinstance(event, EpochCompletedEvent):
            name = f"epoch-{event.epoch:04d}"
        elif isinstance(event, BestLossEvent):
            name = "best"
            self._logger.info(
                f"new best loss {event.mean_loss:.4f} at epoch {event.epoch}"
            )
        else:
            return
        self.repository.save(name, event.checkpoint)
