import logging

import numpy as np
import pytest

from tarflow.entities.config import (
    GuidanceSpec,
    ModelConfig,
    NoiseSpec,
    SamplingConfig,
    TrainingConfig,
)
from tarflow.entities.dataset import Dataset
from tarflow.errors import ParameterError
from tarflow.flow.model import TarFlowModel
from tarflow.flow.patches import patchify, unpatchify
from tarflow.io.datasets import ingest_dataset
from tarflow.numerics import Tensor
from tarflow.numerics.gradcheck import central_difference, relative_error
from tarflow.sampling.guidance import guidance_weight_at, guided_prediction
from tarflow.sampling.sampler import (
    Sampler,
    capture_trajectory,
    denoise,
    sample,
)
from tarflow.training.trainer import Trainer


def test_guided_prediction():
    mu, alpha = guided_prediction(
        Tensor([2.0]), Tensor([0.5]), Tensor([1.0]), Tensor([1.0]), 1.0
    )
    assert mu.item() == 3.0
    assert alpha.item() == 0.0
    same, _ = guided_prediction(
        Tensor([0.7]), Tensor([0.0]), Tensor([0.7]), Tensor([0.0]), 3.5
    )
    assert same.item() == 0.7
    plain, plain_alpha = guided_prediction(
        Tensor([0.1]), Tensor([0.2]), Tensor([9.0]), Tensor([9.0]), 0.0
    )
    assert (plain.item(), plain_alpha.item()) == (0.1, 0.2)


def test_guidance_weight_schedules():
    uniform = GuidanceSpec(mode="conditional", weight=2.0)
    assert {guidance_weight_at(i, 10, uniform) for i in range(1, 10)} == {
        2.0
    }
    linear = GuidanceSpec(mode="conditional", weight=2.0, schedule="linear")
    assert guidance_weight_at(64, 65, linear) == 2.0
    assert guidance_weight_at(1, 65, linear) == pytest.approx(2.0 / 64)
    by_blocks = GuidanceSpec(
        mode="conditional",
        weight=2.0,
        schedule="linear",
        normalizer="blocks",
    )
    assert guidance_weight_at(1, 65, by_blocks, num_blocks=3) == 1.0


def test_guidance_is_inactive_when_it_cannot_change_anything():
    assert not GuidanceSpec().active
    assert not GuidanceSpec(mode="none", weight=4.0).active
    assert not GuidanceSpec(mode="conditional", weight=0.0).active
    assert not GuidanceSpec(
        mode="unconditional", weight=2.0, temperature=1.0
    ).active
    assert GuidanceSpec(
        mode="unconditional", weight=2.0, temperature=0.5
    ).active


def test_identity_model_samples_are_permuted_noise(zero_model):
    result = Sampler(zero_model).sample(5, denoise=False, seed=3)
    assert result.images.shape == (5, 1, 2, 2)
    assert result.latents.shape == (5, 4, 1)
    expected = unpatchify(result.latents[:, ::-1], zero_model.config.grid)
    np.testing.assert_array_equal(result.images, expected.data)


def test_forward_recovers_drawn_latents(tiny_model):
    result = Sampler(tiny_model).sample(4, denoise=False, seed=1)
    z, _ = tiny_model.forward(patchify(result.images, tiny_model.config.grid))
    assert np.max(np.abs(z.data - result.latents)) < 1e-8


def test_sampling_is_deterministic_per_seed(tiny_model):
    sampler = Sampler(tiny_model)
    first = sampler.sample(3, seed=11)
    again = sampler.sample(3, seed=11)
    other = sampler.sample(3, seed=12)
    np.testing.assert_array_equal(first.images, again.images)
    assert not np.allclose(first.images, other.images)


def test_lanes_do_not_depend_on_batch_size(tiny_model):
    sampler = Sampler(tiny_model)
    small = sampler.draw_latents(2, seed=5)
    large = sampler.draw_latents(6, seed=5)
    np.testing.assert_array_equal(small.data, large.data[:2])


def test_zero_weight_guidance_is_bit_identical(make_model):
    model = make_model(num_classes=2)
    sampler = Sampler(model)
    plain = sampler.sample(3, class_labels=1, denoise=False, seed=2)
    guided = sampler.sample(
        3,
        class_labels=1,
        guidance=GuidanceSpec(mode="conditional", weight=0.0),
        denoise=False,
        seed=2,
    )
    np.testing.assert_array_equal(plain.images, guided.images)
    pushed = sampler.sample(
        3,
        class_labels=1,
        guidance=GuidanceSpec(mode="conditional", weight=1.0),
        denoise=False,
        seed=2,
    )
    assert not np.allclose(plain.images, pushed.images)


def test_unit_temperature_guidance_is_unguided(tiny_model):
    sampler = Sampler(tiny_model)
    plain = sampler.sample(3, denoise=False, seed=4)
    degenerate = GuidanceSpec(mode="unconditional", weight=3.0)
    guided = sampler.sample(3, guidance=degenerate, denoise=False, seed=4)
    np.testing.assert_array_equal(plain.images, guided.images)
    perturbed = degenerate.model_copy(update={"temperature": 0.5})
    moved = sampler.sample(3, guidance=perturbed, denoise=False, seed=4)
    assert not np.allclose(plain.images, moved.images)


def test_conditional_guidance_needs_conditional_model(tiny_model):
    with pytest.raises(ParameterError):
        Sampler(tiny_model).sample(
            2, guidance=GuidanceSpec(mode="conditional", weight=1.0)
        )


def test_sample_from_config(make_model):
    model = make_model(num_classes=2)
    config = SamplingConfig(count=2, class_label=0, denoise=False, seed=8)
    direct = Sampler(model).sample(2, class_labels=0, denoise=False, seed=8)
    np.testing.assert_array_equal(sample(model, config).images, direct.images)


def test_trajectory_frames(tiny_model):
    sampler = Sampler(tiny_model)
    plain = sampler.sample(2, denoise=False, trajectory=True, seed=6)
    assert len(plain.trajectories) == 3
    assert plain.trajectories[0].shape == (2, 1, 2, 2)
    np.testing.assert_array_equal(plain.trajectories[-1], plain.images)
    denoised = sampler.sample(2, trajectory=True, seed=6)
    assert len(denoised.trajectories) == 4
    np.testing.assert_array_equal(denoised.trajectories[-1], denoised.images)
    np.testing.assert_array_equal(
        denoised.trajectories[-2], plain.trajectories[-1]
    )


def test_capture_trajectory_matches_sample(tiny_model):
    sampler = Sampler(tiny_model)
    z = sampler.draw_latents(2, seed=9)
    frames = capture_trajectory(tiny_model, z)
    assert len(frames) == 3
    result = sampler.sample(2, denoise=False, seed=9)
    np.testing.assert_array_equal(frames[-1], result.images)
    assert len(capture_trajectory(tiny_model, z, denoise=True)) == 4


def test_identity_model_frames_share_their_values(zero_model, rng):
    z = Tensor(rng.normal(size=(4, 1)))
    frames = capture_trajectory(zero_model, z)
    reference = np.sort(z.data.reshape(-1))
    for frame in frames:
        np.testing.assert_array_equal(np.sort(frame.reshape(-1)), reference)


def test_denoise_under_standard_normal(zero_model):
    y = np.zeros((1, 2, 2))
    y[0, 0, 0] = 2.0
    x = denoise(zero_model, y, sigma=0.5)
    expected = np.zeros((1, 2, 2))
    expected[0, 0, 0] = 1.5
    np.testing.assert_allclose(x, expected, atol=1e-12)
    np.testing.assert_array_equal(denoise(zero_model, y, sigma=0.0), y)


def test_denoise_in_chunks(tiny_model, rng):
    y = rng.normal(size=(5, 1, 2, 2))
    whole = denoise(tiny_model, y, sigma=0.05)
    chunked = denoise(tiny_model, y, sigma=0.05, chunk_size=2)
    np.testing.assert_allclose(chunked, whole, atol=1e-12)


def test_denoise_single_precision_model_in_double(tiny_model, rng):
    y = rng.normal(size=(2, 1, 2, 2))
    single = denoise(tiny_model.astype(np.float32), y, sigma=0.05)
    assert single.dtype == np.float64
    np.testing.assert_allclose(
        single, denoise(tiny_model, y, sigma=0.05), atol=1e-6
    )


def test_score_matches_finite_differences(tiny_model, rng):
    grid = tiny_model.config.grid
    y = rng.normal(size=(1, 2, 2))

    def log_density(values):
        seq = patchify(Tensor(values), grid)
        return tiny_model.log_prob(seq).item()

    score = Sampler(tiny_model).score(y[None])[0]
    numeric = central_difference(log_density, y)
    assert relative_error(score, numeric) < 1e-3


def test_denoise_warns_for_dequantized_models(make_model, caplog):
    model = make_model(noise="uniform")
    with caplog.at_level(logging.WARNING):
        denoise(model, np.zeros((1, 2, 2)))
    assert "uniform noise" in caplog.text


@pytest.mark.slow
def test_denoising_moves_samples_uphill(toy_gaussian_model):
    sampler = Sampler(toy_gaussian_model)
    grid = toy_gaussian_model.config.grid
    raw = sampler.sample(256, denoise=False, seed=21).images
    cleaned = sampler.denoise(raw, sigma=0.05)
    before = toy_gaussian_model.log_prob(patchify(raw, grid)).data.mean()
    after = toy_gaussian_model.log_prob(patchify(cleaned, grid)).data.mean()
    assert after > before


@pytest.mark.slow
def test_guidance_sharpens_the_narrow_class():
    rng = np.random.default_rng(5)
    labels = np.repeat([0, 1], 1024)
    scales = np.where(labels == 0, 0.1, 0.6)[:, None, None, None]
    dataset = Dataset(
        name="two-scales",
        images=rng.normal(size=(2048, 1, 1, 2)) * scales,
        labels=labels,
    )
    config = ModelConfig(
        patch_size=1,
        channels=64,
        num_blocks=2,
        layers_per_block=1,
        noise=NoiseSpec(kind="gaussian", magnitude=1e-3),
        image_shape=(1, 1, 2),
        num_classes=2,
    )
    training = TrainingConfig(
        batch_size=128, epochs=60, seed=0, flips=False, learning_rate=5e-3
    )
    trainer = Trainer(TarFlowModel.init(config, 0), training)
    trainer.fit(dataset)
    sampler = Sampler(trainer.model)
    spread = []
    for weight in (0.0, 1.0, 2.0):
        result = sampler.sample(
            256,
            class_labels=0,
            guidance=GuidanceSpec(mode="conditional", weight=weight),
            denoise=False,
            seed=13,
        )
        spread.append(np.linalg.norm(result.images, axis=-1).mean())
    assert spread[0] > spread[1] > spread[2]


def _across_rows_share(images: np.ndarray) -> float:
    """Mean |step| along the width over the mean |step| along the height;
    small for horizontal stripes."""
    along_width = np.abs(np.diff(images, axis=-1)).mean()
    along_height = np.abs(np.diff(images, axis=-2)).mean()
    return along_width / along_height


@pytest.mark.slow
def test_guidance_strengthens_texture_orientation():
    dataset = ingest_dataset("textures(8,8,6,2)", count=1024)
    horizontal = dataset.images[dataset.labels == 0]
    assert _across_rows_share(horizontal) < 0.5
    config = ModelConfig.from_tag(
        "2-64-2-2-uniform", (1, 8, 8), num_classes=2
    )
    training = TrainingConfig(batch_size=32, epochs=20, learning_rate=2e-3)
    trainer = Trainer(TarFlowModel.init(config, 0), training)
    trainer.fit(dataset)
    sampler = Sampler(trainer.model)
    shares = []
    for weight in (0.0, 1.0, 2.0):
        result = sampler.sample(
            256,
            class_labels=0,
            guidance=GuidanceSpec(mode="conditional", weight=weight),
            denoise=False,
            seed=17,
        )
        shares.append(_across_rows_share(result.images))
    assert shares[0] > shares[1] > shares[2]
