import logging
import math

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from tarflow.entities.config import GuidanceMode, GuidanceSpec, ModelConfig
from tarflow.errors import NumericalRangeError, ParameterError
from tarflow.numerics import (
    Tensor,
    as_tensor,
    cast,
    clip,
    concatenate,
    exp,
    reshape,
)
from tarflow.sampling.guidance import guidance_weight_at, guided_prediction
from tarflow.transformer import FlowBlockParams, init_block
from tarflow.transformer.block import Labels

from .patches import permute
from .predictor import CausalPredictor, TransformerPredictor

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)


def _max_abs(values: np.ndarray) -> float:
    finite = values[np.isfinite(values)]
    if finite.size != values.size:
        return float("inf")
    return float(np.max(np.abs(values))) if values.size else 0.0


def flow_block_forward(
    z: Tensor,
    block: int,
    labels: Labels,
    predictor: CausalPredictor,
    vp_mode: bool = False,
    check: bool = True,
) -> tuple[Tensor, Tensor]:
    """One block of the forward transform on a (B, N, D) batch.

    Returns the transformed batch and the per-example log-determinant,
    accumulated in 64-bit.
    """
    z_perm = permute(z, block)
    mu, alpha = predictor.predict(z_perm, labels)
    if vp_mode:
        alpha = Tensor.zeros(alpha.shape, dtype=alpha.dtype)
    scaled = (z_perm - mu) * exp(-alpha)
    out = concatenate([z_perm[:, :1], scaled[:, 1:]], axis=1)
    logdet = -cast(alpha[:, 1:], np.float64).sum(axis=(1, 2))
    if check and not np.all(np.isfinite(out.data)):
        raise NumericalRangeError(
            "forward transform overflowed",
            _max_abs(alpha.data[:, 1:]),
            block=block,
        )
    return out, logdet


def flow_block_inverse(
    z_next: Tensor,
    block: int,
    labels: Labels,
    predictor: CausalPredictor,
    guidance: GuidanceSpec | None = None,
    alpha_clamp: float | None = None,
    vp_mode: bool = False,
    num_blocks: int = 1,
) -> Tensor:
    """Invert one block row by row with incremental decoding.

    When guidance is active a second decode stream supplies the reference
    prediction; otherwise only one stream runs.
    """
    z_next = as_tensor(z_next)
    b, n, _ = z_next.shape
    guided = guidance is not None and guidance.active
    cache = predictor.new_cache(b)
    ref_cache = predictor.new_cache(b) if guided else None
    if guided and guidance.mode == GuidanceMode.CONDITIONAL:
        ref_labels, ref_temperature = None, 1.0
    elif guided:
        ref_labels, ref_temperature = labels, guidance.temperature
    rows = [z_next[:, 0]]
    for i in range(1, n):
        token = rows[i - 1]
        mu, alpha = predictor.step(cache, token, labels)
        if guided:
            mu_ref, alpha_ref = predictor.step(
                ref_cache, token, ref_labels, ref_temperature
            )
            weight = guidance_weight_at(i, n, guidance, num_blocks)
            mu, alpha = guided_prediction(mu, alpha, mu_ref, alpha_ref, weight)
        if vp_mode:
            alpha = Tensor.zeros(alpha.shape, dtype=alpha.dtype)
        if alpha_clamp is not None:
            alpha = clip(alpha, -alpha_clamp, alpha_clamp)
        row = z_next[:, i] * exp(alpha) + mu
        if not np.all(np.isfinite(row.data)):
            raise NumericalRangeError(
                "inverse transform overflowed",
                _max_abs(alpha.data),
                block=block,
                position=i,
            )
        rows.append(row)
    z_perm = concatenate([reshape(r, (b, 1, r.shape[-1])) for r in rows], 1)
    return permute(z_perm, block)


class BlockDiagnostics(BaseModel):
    block: int
    max_abs_alpha: float
    max_abs_mu: float
    max_abs_z: float = Field(description="Largest |entry| of the output.")
    logdet_mean: float
    finite: bool


class TarFlowModel(BaseModel):
    """T stacked flow blocks with alternating sequence order."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    config: ModelConfig
    blocks: list[FlowBlockParams]
    prior_log_var: Tensor | None = Field(
        default=None,
        description="Learned (N, D) prior log-variance, VP mode only.",
    )

    @classmethod
    def init(
        cls,
        config: ModelConfig,
        rng: np.random.Generator | int = 0,
        head_std: float = 0.0,
    ) -> "TarFlowModel":
        rng = np.random.default_rng(rng)
        blocks = [
            init_block(config, rng, head_std=head_std)
            for _ in range(config.num_blocks)
        ]
        prior_log_var = None
        if config.vp_mode:
            grid = config.grid
            prior_log_var = Tensor.zeros(
                (grid.num_patches, grid.patch_dim), dtype=config.dtype
            )
        logger.info(
            f"[model:{config.tag}] initialised "
            f"{len(blocks)} blocks, {cls._count(blocks, prior_log_var)} "
            "parameters"
        )
        return cls(config=config, blocks=blocks, prior_log_var=prior_log_var)

    @staticmethod
    def _count(blocks, prior_log_var) -> int:
        total = sum(
            t.size for blk in blocks for t in blk.named_tensors().values()
        )
        return total + (
            prior_log_var.size if prior_log_var is not None else 0
        )

    @property
    def parameter_count(self) -> int:
        return self._count(self.blocks, self.prior_log_var)

    @property
    def predictors(self) -> list[TransformerPredictor]:
        return [TransformerPredictor(blk) for blk in self.blocks]

    @property
    def num_positions(self) -> int:
        return self.config.grid.num_patches

    @property
    def patch_dim(self) -> int:
        return self.config.grid.patch_dim

    def named_tensors(self) -> dict[str, Tensor]:
        named: dict[str, Tensor] = {}
        for t, blk in enumerate(self.blocks):
            named.update(blk.named_tensors(f"blocks.{t}."))
        if self.prior_log_var is not None:
            named["prior_log_var"] = self.prior_log_var
        return named

    def with_tensors(self, tensors: dict[str, Tensor]) -> "TarFlowModel":
        blocks = [
            blk.with_tensors(tensors, f"blocks.{t}.")
            for t, blk in enumerate(self.blocks)
        ]
        prior = tensors.get("prior_log_var", self.prior_log_var)
        if self.prior_log_var is None:
            prior = None
        return self.model_copy(
            update={"blocks": blocks, "prior_log_var": prior}
        )

    def astype(self, dtype) -> "TarFlowModel":
        named = self.named_tensors()
        model = self.with_tensors(
            {k: Tensor(v.data, dtype=dtype) for k, v in named.items()}
        )
        config = self.config.model_copy(
            update={"precision": np.dtype(dtype).name}
        )
        return model.model_copy(update={"config": config})

    def _check_labels(self, labels: Labels) -> None:
        if labels is not None and not self.config.conditional:
            raise ParameterError(
                "class label given to an unconditional model"
            )

    def _batched(self, x) -> tuple[Tensor, bool]:
        x = as_tensor(x)
        if x.ndim == 2:
            return reshape(x, (1, *x.shape)), True
        return x, False

    def forward(
        self, x: Tensor, labels: Labels = None
    ) -> tuple[Tensor, Tensor]:
        """z_T and the total log-determinant (per example, 64-bit)."""
        self._check_labels(labels)
        z, unbatched = self._batched(x)
        total = Tensor.zeros((z.shape[0],), dtype=np.float64)
        for t, predictor in enumerate(self.predictors):
            z, logdet = flow_block_forward(
                z, t, labels, predictor, vp_mode=self.config.vp_mode
            )
            total = total + logdet
        if unbatched:
            return z[0], total[0]
        return z, total

    def prior_log_prob(self, z: Tensor) -> Tensor:
        """Per-example log-density of (B, N, D) latents under the prior."""
        z = cast(z, np.float64)
        const = 0.5 * self.num_positions * self.patch_dim * LOG_2PI
        if self.prior_log_var is None:
            return -0.5 * (z * z).sum(axis=(1, 2)) - const
        log_var = cast(self.prior_log_var, np.float64)
        quad = (z * z * exp(-log_var) + log_var).sum(axis=(1, 2))
        return -0.5 * quad - const

    def log_prob(self, x: Tensor, labels: Labels = None) -> Tensor:
        x, unbatched = self._batched(x)
        z, logdet = self.forward(x, labels)
        lp = self.prior_log_prob(z) + logdet
        return lp[0] if unbatched else lp

    def inverse(
        self,
        z: Tensor,
        labels: Labels = None,
        guidance: GuidanceSpec | None = None,
        alpha_clamp: float | None = None,
        trajectory: bool = False,
    ) -> Tensor | tuple[Tensor, list[Tensor]]:
        """x = f⁻¹(z). With `trajectory`, also returns z^T..z^0."""
        self._check_labels(labels)
        if (
            guidance is not None
            and guidance.active
            and guidance.mode == GuidanceMode.CONDITIONAL
            and not self.config.conditional
        ):
            raise ParameterError(
                "conditional guidance needs a class-conditional model"
            )
        x, unbatched = self._batched(z)
        frames = [x]
        predictors = self.predictors
        for t in reversed(range(len(predictors))):
            x = flow_block_inverse(
                x,
                t,
                labels,
                predictors[t],
                guidance=guidance,
                alpha_clamp=alpha_clamp,
                vp_mode=self.config.vp_mode,
                num_blocks=len(predictors),
            )
            frames.append(x)
        if unbatched:
            x = x[0]
            frames = [f[0] for f in frames]
        if trajectory:
            return x, frames
        return x

    def diagnose(
        self, x: Tensor, labels: Labels = None
    ) -> list[BlockDiagnostics]:
        """Per-block magnitudes of one forward pass, without range checks."""
        z, _ = self._batched(x)
        report = []
        for t, predictor in enumerate(self.predictors):
            z_perm = permute(z, t)
            mu, alpha = predictor.predict(z_perm, labels)
            with np.errstate(all="ignore"):
                z, logdet = flow_block_forward(
                    z,
                    t,
                    labels,
                    predictor,
                    vp_mode=self.config.vp_mode,
                    check=False,
                )
            report.append(
                BlockDiagnostics(
                    block=t,
                    max_abs_alpha=_max_abs(alpha.data[:, 1:]),
                    max_abs_mu=_max_abs(mu.data),
                    max_abs_z=_max_abs(z.data),
                    logdet_mean=float(np.mean(logdet.data)),
                    finite=bool(np.all(np.isfinite(z.data))),
                )
            )
        return report
