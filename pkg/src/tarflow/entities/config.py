import re
from enum import Enum
from pathlib import Path
from typing import ClassVar, Literal

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    computed_field,
    field_validator,
    model_validator,
)

HEAD_DIM = 64
DEFAULT_BIN = 1.0 / 128

_TAG_PATTERN = re.compile(
    r"^(?P<P>\d+)-(?P<Ch>\d+)-(?P<T>\d+)-(?P<K>\d+)-(?P<noise>.+)$"
)
_NOISE_PATTERNS = [
    (re.compile(r"^gauss(?:ian)?(?P<v>[0-9.eE+-]+)$"), "gaussian", False),
    (re.compile(r"^N\(0,\s*(?P<v>[0-9.eE+-]+)\^2\)$"), "gaussian", False),
    (re.compile(r"^unif(?:orm)?(?P<v>[0-9.eE+-]+)$"), "uniform", False),
    (re.compile(r"^U\(0,\s*1/(?P<v>[0-9]+)\)$"), "uniform", True),
]


class NoiseKind(str, Enum):
    UNIFORM = "uniform"
    GAUSSIAN = "gaussian"


class NoiseSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: NoiseKind = Field(
        description="""Uniform dequantization (likelihood regime) or
        Gaussian augmentation (generation regime)."""
    )
    magnitude: float = Field(
        gt=0,
        description="""Bin width for uniform noise, standard deviation
        for gaussian noise.""",
    )

    @property
    def tag(self) -> str:
        if self.kind == NoiseKind.GAUSSIAN:
            return f"gauss{self.magnitude:g}"
        return f"uniform{self.magnitude:g}"

    @classmethod
    def from_tag(cls, tag: str) -> "NoiseSpec":
        if tag in ("uniform", "unif"):
            return cls(kind=NoiseKind.UNIFORM, magnitude=DEFAULT_BIN)
        for pattern, kind, reciprocal in _NOISE_PATTERNS:
            match = pattern.match(tag)
            if match:
                value = float(match.group("v"))
                if reciprocal:
                    value = 1.0 / value
                return cls(kind=NoiseKind(kind), magnitude=value)
        raise ValueError(
            f"unrecognised noise tag '{tag}', expected one of gaussN, "
            "gaussianN, uniformN, uniform, N(0,s^2), U(0,1/k)"
        )


class PatchGrid(BaseModel):
    model_config = ConfigDict(frozen=True)

    channels: int = Field(gt=0, description="Image channels C.")
    height: int = Field(gt=0, description="Image height H.")
    width: int = Field(gt=0, description="Image width W.")
    patch_size: int = Field(gt=0, description="Patch side S.")

    @model_validator(mode="after")
    def _check_divisible(self) -> "PatchGrid":
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ValueError(
                f"patch size {self.patch_size} must divide image height "
                f"{self.height} and width {self.width}"
            )
        return self

    @computed_field
    @property
    def num_patches(self) -> int:
        """N = H·W / S²"""
        return (self.height // self.patch_size) * (
            self.width // self.patch_size
        )

    @computed_field
    @property
    def patch_dim(self) -> int:
        """D = C·S²"""
        return self.channels * self.patch_size**2


class ModelConfig(BaseModel):
    """The P-Ch-T-K-noise architecture descriptor plus conditioning."""

    model_config = ConfigDict(frozen=True)

    head_dim: ClassVar[int] = HEAD_DIM

    patch_size: int = Field(gt=0, description="Patch size P.")
    channels: int = Field(
        description="Transformer width Ch, a positive multiple of 64."
    )
    num_blocks: int = Field(ge=1, description="Number of flow blocks T.")
    layers_per_block: int = Field(
        ge=1, description="Attention layers per block K."
    )
    noise: NoiseSpec = Field(description="Training noise p_eps.")
    image_shape: tuple[int, int, int] = Field(
        description="(C, H, W) of the modelled images."
    )
    num_classes: int = Field(
        default=0, ge=0, description="0 means unconditional."
    )
    label_dropout: float = Field(
        default=0.1,
        ge=0.0,
        le=1.0,
        description="Probability of replacing a training label by the null "
        "label.",
    )
    vp_mode: bool = Field(
        default=False,
        description="Volume preserving ablation: alpha fixed to zero and a "
        "learned prior variance.",
    )
    precision: Literal["float32", "float64"] = Field(
        default="float64",
        description="Parameter precision. Likelihood and oracles use 64-bit.",
    )
    alpha_clamp: float | None = Field(
        default=5.0,
        gt=0,
        description="|alpha| bound applied only while sampling.",
    )

    @field_validator("channels")
    @classmethod
    def _check_channels(cls, value: int) -> int:
        if value <= 0 or value % HEAD_DIM:
            raise ValueError(
                f"must be a positive multiple of {HEAD_DIM} "
                f"(e.g. 64, 128, 256), got {value}"
            )
        return value

    @model_validator(mode="after")
    def _check_grid(self) -> "ModelConfig":
        self.grid
        return self

    @property
    def grid(self) -> PatchGrid:
        c, h, w = self.image_shape
        return PatchGrid(
            channels=c, height=h, width=w, patch_size=self.patch_size
        )

    @property
    def num_heads(self) -> int:
        return self.channels // HEAD_DIM

    @property
    def conditional(self) -> bool:
        return self.num_classes > 0

    @property
    def null_label(self) -> int:
        """Index of the null-label embedding row."""
        return self.num_classes

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.precision)

    @property
    def tag(self) -> str:
        return (
            f"{self.patch_size}-{self.channels}-{self.num_blocks}-"
            f"{self.layers_per_block}-{self.noise.tag}"
        )

    @staticmethod
    def tag_fields(tag: str) -> dict:
        """The P, Ch, T, K and noise fields encoded by a config tag."""
        match = _TAG_PATTERN.match(tag.strip())
        if not match:
            raise ValueError(
                f"malformed config tag '{tag}', expected P-Ch-T-K-noise"
            )
        return {
            "patch_size": int(match.group("P")),
            "channels": int(match.group("Ch")),
            "num_blocks": int(match.group("T")),
            "layers_per_block": int(match.group("K")),
            "noise": NoiseSpec.from_tag(match.group("noise")),
        }

    @classmethod
    def from_tag(
        cls, tag: str, image_shape: tuple[int, int, int], **kwargs
    ) -> "ModelConfig":
        return cls(
            **cls.tag_fields(tag), image_shape=image_shape, **kwargs
        )


class TrainingConfig(BaseModel):
    batch_size: int = Field(default=64, gt=0)
    epochs: int = Field(default=1, ge=1)
    seed: int = Field(default=0)
    flips: bool = Field(
        default=True,
        description="Random horizontal flips; only applied with gaussian "
        "noise (generation regime).",
    )
    learning_rate: float = Field(default=1e-4, gt=0)
    min_learning_rate: float = Field(default=1e-6, gt=0)
    warmup_steps: int | None = Field(
        default=None,
        ge=0,
        description="None means one epoch, ceil(|dataset| / batch).",
    )
    weight_decay: float = Field(default=1e-4, ge=0)
    betas: tuple[float, float] = Field(default=(0.9, 0.95))
    eps: float = Field(
        default=1e-8, gt=0, description="AdamW denominator epsilon."
    )
    grad_clip: float | None = Field(
        default=1.0, gt=0, description="Global gradient norm bound."
    )
    checkpoint_every: int = Field(
        default=1, ge=1, description="Checkpoint cadence in epochs."
    )


class GuidanceMode(str, Enum):
    NONE = "none"
    CONDITIONAL = "conditional"
    UNCONDITIONAL = "unconditional"


class GuidanceSchedule(str, Enum):
    UNIFORM = "uniform"
    LINEAR = "linear"


class ScheduleNormalizer(str, Enum):
    POSITIONS = "positions"
    BLOCKS = "blocks"


class GuidanceSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    mode: GuidanceMode = GuidanceMode.NONE
    weight: float = Field(default=0.0, ge=0.0, description="Guidance w.")
    temperature: float = Field(
        default=1.0,
        gt=0.0,
        description="Attention temperature of the reference stream "
        "(unconditional mode).",
    )
    schedule: GuidanceSchedule = GuidanceSchedule.UNIFORM
    normalizer: ScheduleNormalizer = Field(
        default=ScheduleNormalizer.POSITIONS,
        description="Divide the linear schedule by N-1 (positions) or by "
        "T-1 (blocks).",
    )

    @property
    def active(self) -> bool:
        """False when the guided prediction provably equals the plain one."""
        if self.mode == GuidanceMode.NONE or self.weight == 0.0:
            return False
        if self.mode == GuidanceMode.UNCONDITIONAL:
            return self.temperature != 1.0
        return True


class SamplingConfig(BaseModel):
    count: int = Field(default=16, gt=0)
    class_label: int | None = Field(default=None, ge=0)
    guidance: GuidanceSpec = Field(default_factory=GuidanceSpec)
    denoise: bool = True
    trajectory: bool = False
    seed: int = 0
    chunk_size: int | None = Field(
        default=None, gt=0, description="Denoising batch chunk."
    )
    denoise_sigma: float | None = Field(
        default=None,
        gt=0,
        description="Tweedie noise level, the training noise when unset.",
    )


class EvaluationConfig(BaseModel):
    draws_per_example: int = Field(default=1, ge=1)
    seed: int = 0


class PathsConfig(BaseModel):
    dataset: str = Field(
        default="textures(8,8,0)",
        description="IDX file, directory of PGM/PPM images or a generator "
        "such as gaussian2d(0.5), checkerboard2d, textures(H,W,seed).",
    )
    labels: str | None = Field(
        default=None, description="Optional IDX label file."
    )
    dataset_count: int = Field(
        default=1024, gt=0, description="Examples drawn from a generator."
    )
    output_dir: Path = Path("runs/default")
    checkpoint: Path | None = None


class RunConfig(BaseModel):
    model: ModelConfig
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    sampling: SamplingConfig = Field(default_factory=SamplingConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)
