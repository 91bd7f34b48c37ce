import logging

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from tarflow.entities.config import (
    GuidanceMode,
    GuidanceSpec,
    NoiseKind,
    SamplingConfig,
)
from tarflow.errors import ParameterError
from tarflow.flow.model import TarFlowModel
from tarflow.flow.patches import patchify, unpatchify
from tarflow.numerics import Tape, Tensor, backward
from tarflow.transformer.block import Labels
from utils.logger import CustomLoggingAdapter


class SampleResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    images: np.ndarray = Field(description="(count, C, H, W) samples.")
    latents: np.ndarray = Field(description="(count, N, D) prior draws.")
    trajectories: list[np.ndarray] | None = Field(
        default=None,
        description="Frames z^T..z^0 in pixel space, each (count, C, H, W), "
        "followed by the denoised images when denoising is on.",
    )


def lane_generators(seed: int, count: int) -> list[np.random.Generator]:
    """One independent stream per sampling lane, all derived from `seed`."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [np.random.default_rng(child) for child in children]


class Sampler:
    def __init__(self, model: TarFlowModel):
        self.model = model
        self._logger = CustomLoggingAdapter(
            logging.getLogger(__name__),
            {"ctx": f"sampler:{model.config.tag}"},
        )

    def _check_guidance(self, guidance: GuidanceSpec | None) -> None:
        if guidance is None or guidance.mode != GuidanceMode.CONDITIONAL:
            return
        if not self.model.config.conditional:
            raise ParameterError(
                "conditional guidance needs a class-conditional model"
            )

    def draw_latents(self, count: int, seed: int) -> Tensor:
        n, d = self.model.num_positions, self.model.patch_dim
        rngs = lane_generators(seed, count)
        eps = np.stack([rng.standard_normal((n, d)) for rng in rngs])
        if self.model.prior_log_var is not None:
            eps = eps * np.exp(0.5 * self.model.prior_log_var.data)
        return Tensor(eps, dtype=self.model.config.dtype)

    def sample(
        self,
        count: int,
        class_labels: Labels = None,
        guidance: GuidanceSpec | None = None,
        denoise: bool = True,
        seed: int = 0,
        trajectory: bool = False,
        chunk_size: int | None = None,
        sigma: float | None = None,
    ) -> SampleResult:
        self._check_guidance(guidance)
        grid = self.model.config.grid
        z = self.draw_latents(count, seed)
        self._logger.info(
            f"sampling {count} images, guidance={guidance}, denoise={denoise}"
        )
        inverted = self.model.inverse(
            z,
            class_labels,
            guidance=guidance,
            alpha_clamp=self.model.config.alpha_clamp,
            trajectory=trajectory,
        )
        frames = None
        if trajectory:
            x, latents = inverted
            frames = [unpatchify(f, grid).numpy() for f in latents]
        else:
            x = inverted
        images = unpatchify(x, grid).numpy()
        if denoise:
            images = self.denoise(
                images, sigma, labels=class_labels, chunk_size=chunk_size
            )
            if frames is not None:
                frames.append(images)
        return SampleResult(
            images=images, latents=z.numpy(), trajectories=frames
        )

    def score(
        self, images: np.ndarray, labels: Labels = None
    ) -> np.ndarray:
        """∇_y log p(y) for a (B, C, H, W) batch, in 64-bit."""
        model = self.model
        if model.config.dtype != np.float64:
            model = model.astype(np.float64)
        seq = patchify(Tensor(images, dtype=np.float64), model.config.grid)
        with Tape() as tape:
            tape.watch(seq)
            total = model.log_prob(seq, labels).sum()
        grads = backward(tape, total)
        return unpatchify(Tensor.wrap(grads[seq]), model.config.grid).numpy()

    def denoise(
        self,
        images: np.ndarray,
        sigma: float | None = None,
        labels: Labels = None,
        chunk_size: int | None = None,
    ) -> np.ndarray:
        """Tweedie step y + σ²·∇ log p(y), optionally in batch chunks."""
        noise = self.model.config.noise
        if sigma is None:
            sigma = noise.magnitude
            if noise.kind != NoiseKind.GAUSSIAN:
                self._logger.warning(
                    "denoising a model trained with uniform noise, "
                    f"using sigma={sigma}"
                )
        y = np.asarray(images, dtype=np.float64)
        unbatched = y.ndim == 3
        if unbatched:
            y = y[None]
        step = chunk_size or len(y)
        out = np.empty_like(y)
        for start in range(0, len(y), step):
            chunk = slice(start, start + step)
            chunk_labels = labels
            if labels is not None and np.ndim(labels) > 0:
                chunk_labels = np.asarray(labels)[chunk]
            grad = self.score(y[chunk], chunk_labels)
            out[chunk] = y[chunk] + sigma**2 * grad
        return out[0] if unbatched else out


def sample(
    model: TarFlowModel, config: SamplingConfig
) -> SampleResult:
    return Sampler(model).sample(
        config.count,
        class_labels=config.class_label,
        guidance=config.guidance,
        denoise=config.denoise,
        seed=config.seed,
        trajectory=config.trajectory,
        chunk_size=config.chunk_size,
        sigma=config.denoise_sigma,
    )


def denoise(
    model: TarFlowModel,
    images: np.ndarray,
    sigma: float | None = None,
    labels: Labels = None,
    chunk_size: int | None = None,
) -> np.ndarray:
    return Sampler(model).denoise(images, sigma, labels, chunk_size)


def capture_trajectory(
    model: TarFlowModel,
    z: Tensor,
    labels: Labels = None,
    guidance: GuidanceSpec | None = None,
    denoise: bool = False,
) -> list[np.ndarray]:
    """Pixel-space frames z^T..z^0 of one inverse pass, plus the denoised
    image when `denoise` is set."""
    grid = model.config.grid
    _, latents = model.inverse(
        z,
        labels,
        guidance=guidance,
        alpha_clamp=model.config.alpha_clamp,
        trajectory=True,
    )
    frames = [unpatchify(f, grid).numpy() for f in latents]
    if denoise:
        frames.append(Sampler(model).denoise(frames[-1], labels=labels))
    return frames
