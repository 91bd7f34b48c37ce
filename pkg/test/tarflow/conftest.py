import numpy as np
import pytest

from tarflow.entities.config import ModelConfig, NoiseSpec, TrainingConfig
from tarflow.entities.dataset import Dataset
from tarflow.flow.model import TarFlowModel
from tarflow.io.datasets import gaussian2d
from tarflow.training.trainer import Trainer
from utils.events.local import LocalPublisher, LocalSubscriber

# small enough to keep exp(alpha) tame, large enough to move every output
HEAD_STD = 0.05


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_config():
    def _make(
        image_shape=(1, 2, 2),
        patch_size=1,
        num_blocks=2,
        layers_per_block=1,
        noise="gauss0.05",
        **kwargs,
    ) -> ModelConfig:
        return ModelConfig(
            patch_size=patch_size,
            channels=64,
            num_blocks=num_blocks,
            layers_per_block=layers_per_block,
            noise=NoiseSpec.from_tag(noise),
            image_shape=image_shape,
            **kwargs,
        )

    return _make


@pytest.fixture
def make_model(make_config):
    def _make(seed=0, head_std=HEAD_STD, **kwargs) -> TarFlowModel:
        return TarFlowModel.init(make_config(**kwargs), seed, head_std)

    return _make


@pytest.fixture
def tiny_model(make_model) -> TarFlowModel:
    """N=4, D=1, T=2, K=1 with non-zero heads."""
    return make_model()


@pytest.fixture
def zero_model(make_model) -> TarFlowModel:
    return make_model(head_std=0.0)


class LossTrace(LocalSubscriber):
    def __init__(self, publisher):
        super().__init__(publisher)
        self.losses: list[float] = []

    def handle(self, event):
        self.losses.append(event.loss_nats)


@pytest.fixture(scope="session")
def toy_gaussian_run() -> tuple[TarFlowModel, list[float]]:
    """T=2, K=2 model trained on 2-d points from N(0, 0.25·I), with its
    per-step losses."""
    config = ModelConfig(
        patch_size=1,
        channels=64,
        num_blocks=2,
        layers_per_block=2,
        noise=NoiseSpec(kind="gaussian", magnitude=1e-3),
        image_shape=(1, 1, 2),
    )
    dataset = Dataset(
        name="gaussian2d(0.5)",
        images=gaussian2d(0.5, 2048, np.random.default_rng(1)),
    )
    training = TrainingConfig(
        batch_size=128,
        epochs=60,
        seed=0,
        flips=False,
        learning_rate=5e-3,
    )
    publisher = LocalPublisher()
    trace = LossTrace(publisher)
    trace.subscribe(["training.step_completed"])
    trainer = Trainer(TarFlowModel.init(config, 0), training, publisher)
    trainer.fit(dataset)
    return trainer.model, trace.losses


@pytest.fixture(scope="session")
def toy_gaussian_model(toy_gaussian_run) -> TarFlowModel:
    return toy_gaussian_run[0]
