import logging
import math

import numpy as np
from pydantic import BaseModel, Field

from tarflow.entities.config import DEFAULT_BIN, NoiseKind
from tarflow.entities.dataset import Dataset
from tarflow.flow.model import TarFlowModel
from tarflow.flow.patches import patchify
from tarflow.numerics import Tensor

logger = logging.getLogger(__name__)


class BpdReport(BaseModel):
    mean_bpd: float = Field(description="Mean bits per dimension.")
    stderr: float = Field(ge=0, description="Standard error over examples.")
    n: int = Field(gt=0, description="Number of examples.")
    draws: int = Field(gt=0, description="Noise draws per example.")
    precision: str = "float64"
    bin_width: float = Field(gt=0, description="Dequantization bin.")


def bits_per_dim(
    log_prob: np.ndarray, dims: int, bin_width: float = DEFAULT_BIN
) -> np.ndarray:
    """−log p / (dims·ln 2) − log2(bin): nats of a continuous density on
    the dequantized data to bits of the discrete data."""
    return -np.asarray(log_prob) / (dims * math.log(2)) - math.log2(bin_width)


def bpd(
    dataset: Dataset,
    model: TarFlowModel,
    draws_per_example: int = 1,
    seed: int = 0,
    batch_size: int = 256,
) -> BpdReport:
    """Dequantized bits per dimension, a lower bound on discrete likelihood.

    Draw d adds `rng.uniform(0, bin, size=images.shape)` for the whole
    dataset, with `rng = np.random.default_rng(seed)` and draws taken in
    order. Evaluation is always 64-bit.
    """
    noise = model.config.noise
    if noise.kind != NoiseKind.UNIFORM:
        logger.warning(
            f"[bpd] model was trained with {noise.tag} noise, BPD is not "
            "comparable to the uniform dequantization protocol"
        )
        bin_width = DEFAULT_BIN
    else:
        bin_width = noise.magnitude
    if model.config.dtype != np.float64:
        model = model.astype(np.float64)
    grid = model.config.grid
    dims = grid.num_patches * grid.patch_dim
    rng = np.random.default_rng(seed)
    images = np.asarray(dataset.images, dtype=np.float64)
    labels = dataset.labels if model.config.conditional else None
    total = np.zeros(len(images))
    for _ in range(draws_per_example):
        noisy = images + rng.uniform(0.0, bin_width, size=images.shape)
        for start in range(0, len(images), batch_size):
            chunk = slice(start, start + batch_size)
            seq = patchify(Tensor(noisy[chunk]), grid)
            chunk_labels = None if labels is None else labels[chunk]
            total[chunk] += model.log_prob(seq, chunk_labels).data
    per_example = bits_per_dim(total / draws_per_example, dims, bin_width)
    n = len(per_example)
    stderr = 0.0
    if n > 1:
        stderr = float(np.std(per_example, ddof=1) / math.sqrt(n))
    report = BpdReport(
        mean_bpd=float(np.mean(per_example)),
        stderr=stderr,
        n=n,
        draws=draws_per_example,
        bin_width=bin_width,
    )
    logger.info(
        f"[bpd] {report.mean_bpd:.4f} ± {report.stderr:.4f} bits/dim "
        f"over {n} examples, {draws_per_example} draws"
    )
    return report
