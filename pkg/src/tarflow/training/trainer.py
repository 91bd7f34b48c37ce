import logging
import math
import time

import numpy as np
from pydantic import BaseModel

from tarflow.entities.config import NoiseKind, TrainingConfig
from tarflow.entities.dataset import Dataset
from tarflow.errors import ParameterError
from tarflow.events.eventlist import (
    BestLossEvent,
    EpochCompletedEvent,
    StepCompletedEvent,
)
from tarflow.flow.model import LOG_2PI, TarFlowModel
from tarflow.flow.patches import patchify
from tarflow.numerics import Tensor
from tarflow.repositories.checkpoint_repository import Checkpoint
from utils.events.local import LocalPublisher
from utils.logger import CustomLoggingAdapter

from .loss import loss_and_grads
from .noise import add_noise, drop_labels, random_flip
from .optim import OptimizerState, adamw_step, clip_grad_norm, lr_schedule


class EpochSummary(BaseModel):
    epoch: int
    steps: int
    mean_loss: float
    nll_per_dim: float


class Trainer:
    """Noise-augmented maximum likelihood training of one model.

    All randomness (shuffling, flips, noise, label dropout) comes from a
    single generator seeded by `TrainingConfig.seed`, so a run is
    reproducible and resumable from the generator state in a checkpoint.
    """

    def __init__(
        self,
        model: TarFlowModel,
        config: TrainingConfig,
        publisher: LocalPublisher | None = None,
    ):
        self.model = model
        self.config = config
        self.publisher = publisher or LocalPublisher()
        self.rng = np.random.default_rng(config.seed)
        self.optimizer = OptimizerState.for_params(
            model.named_tensors(),
            betas=config.betas,
            weight_decay=config.weight_decay,
            eps=config.eps,
            base_lr=config.learning_rate,
        )
        self.step = 0
        self.epoch = 0
        self.best_loss: float | None = None
        self._started = time.perf_counter()
        self._logger = CustomLoggingAdapter(
            logging.getLogger(__name__), {"ctx": f"trainer:{model.config.tag}"}
        )

    @classmethod
    def from_checkpoint(
        cls,
        checkpoint: Checkpoint,
        config: TrainingConfig,
        publisher: LocalPublisher | None = None,
    ) -> "Trainer":
        trainer = cls(checkpoint.to_model(), config, publisher)
        if checkpoint.optimizer is not None:
            trainer.optimizer = checkpoint.optimizer
        if checkpoint.rng_state is not None:
            trainer.rng.bit_generator.state = checkpoint.rng_state
        trainer.step = checkpoint.step
        trainer.epoch = checkpoint.epoch
        trainer.best_loss = checkpoint.best_loss
        trainer._logger.info(
            f"resumed at epoch {trainer.epoch}, step {trainer.step}"
        )
        return trainer

    def checkpoint(self) -> Checkpoint:
        return Checkpoint.from_model(
            self.model,
            optimizer=self.optimizer.model_copy(deep=True),
            rng_state=self.rng.bit_generator.state,
            step=self.step,
            epoch=self.epoch,
            best_loss=self.best_loss,
        )

    def steps_per_epoch(self, dataset: Dataset) -> int:
        return math.ceil(len(dataset) / self.config.batch_size)

    def warmup_steps(self, dataset: Dataset) -> int:
        if self.config.warmup_steps is not None:
            return self.config.warmup_steps
        return self.steps_per_epoch(dataset)

    def _check_dataset(self, dataset: Dataset) -> None:
        model_config = self.model.config
        if dataset.image_shape != model_config.image_shape:
            raise ParameterError(
                f"dataset images are {dataset.image_shape}, model expects "
                f"{model_config.image_shape}"
            )
        if model_config.conditional and dataset.labels is None:
            raise ParameterError("conditional model needs a labelled dataset")

    def prepare_batch(
        self, images: np.ndarray, labels: np.ndarray | None
    ) -> tuple[Tensor, np.ndarray | None]:
        """Flip, add noise, patchify, and drop labels."""
        model_config = self.model.config
        gaussian = model_config.noise.kind == NoiseKind.GAUSSIAN
        if self.config.flips and gaussian:
            images = random_flip(images, self.rng)
        noisy = add_noise(images, model_config.noise, self.rng)
        x = Tensor(noisy, dtype=model_config.dtype)
        seq = patchify(x, model_config.grid)
        if not model_config.conditional:
            return seq, None
        dropped = drop_labels(
            labels,
            model_config.label_dropout,
            model_config.null_label,
            self.rng,
        )
        return seq, dropped

    def train_step(
        self,
        images: np.ndarray,
        labels: np.ndarray | None,
        warmup_steps: int,
        total_steps: int,
    ) -> float:
        seq, batch_labels = self.prepare_batch(images, labels)
        loss, grads = loss_and_grads(self.model, seq, batch_labels, self.step)
        grads, norm = clip_grad_norm(grads, self.config.grad_clip)
        lr = lr_schedule(
            self.step,
            warmup_steps,
            total_steps,
            base_lr=self.config.learning_rate,
            min_lr=self.config.min_learning_rate,
        )
        updated = adamw_step(
            self.model.named_tensors(), grads, self.optimizer, lr
        )
        self.model = self.model.with_tensors(updated)
        self.step += 1
        self._logger.bind(step=self.step).debug(
            f"loss {loss:.5f} lr {lr:.3g} |g| {norm:.3g}"
        )
        self.publisher.publish(
            StepCompletedEvent(
                step=self.step,
                lr=lr,
                loss_nats=loss,
                seconds=time.perf_counter() - self._started,
            )
        )
        return loss

    def fit(
        self, dataset: Dataset, epochs: int | None = None
    ) -> list[EpochSummary]:
        """Train until `epochs` total epochs have completed.

        A trainer resumed from a checkpoint continues from its epoch.
        """
        self._check_dataset(dataset)
        epochs = epochs if epochs is not None else self.config.epochs
        per_epoch = self.steps_per_epoch(dataset)
        warmup = self.warmup_steps(dataset)
        total = epochs * per_epoch
        grid = self.model.config.grid
        dims = grid.num_patches * grid.patch_dim
        summaries = []
        while self.epoch < epochs:
            order = self.rng.permutation(len(dataset))
            losses = []
            for start in range(0, len(dataset), self.config.batch_size):
                idx = order[start : start + self.config.batch_size]
                labels = None
                if dataset.labels is not None:
                    labels = dataset.labels[idx]
                losses.append(
                    self.train_step(dataset.images[idx], labels, warmup, total)
                )
            self.epoch += 1
            mean_loss = float(np.mean(losses))
            summary = EpochSummary(
                epoch=self.epoch,
                steps=len(losses),
                mean_loss=mean_loss,
                nll_per_dim=mean_loss / dims + 0.5 * LOG_2PI,
            )
            summaries.append(summary)
            self._logger.info(
                f"epoch {self.epoch}/{epochs} loss {mean_loss:.4f} nats, "
                f"{summary.nll_per_dim:.4f} nats/dim"
            )
            self._end_of_epoch(mean_loss, last=self.epoch == epochs)
        return summaries

    def _end_of_epoch(self, mean_loss: float, last: bool) -> None:
        improved = self.best_loss is None or mean_loss < self.best_loss
        if improved:
            self.best_loss = mean_loss
        checkpoint = self.checkpoint()
        if last or self.epoch % self.config.checkpoint_every == 0:
            self.publisher.publish(
                EpochCompletedEvent(
                    epoch=self.epoch,
                    mean_loss=mean_loss,
                    checkpoint=checkpoint,
                )
            )
        if improved:
            self.publisher.publish(
                BestLossEvent(
                    epoch=self.epoch,
                    mean_loss=mean_loss,
                    checkpoint=checkpoint,
                )
            )
