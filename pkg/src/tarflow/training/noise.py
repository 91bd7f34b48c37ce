import numpy as np

from tarflow.entities.config import NoiseKind, NoiseSpec


def add_noise(
    x: np.ndarray, spec: NoiseSpec, rng: np.random.Generator
) -> np.ndarray:
    """Uniform dequantization U[0, bin) or gaussian N(0, σ²), i.i.d."""
    if spec.kind == NoiseKind.UNIFORM:
        eps = rng.uniform(0.0, spec.magnitude, size=x.shape)
    else:
        eps = rng.normal(0.0, spec.magnitude, size=x.shape)
    return x + eps.astype(x.dtype, copy=False)


def drop_labels(
    labels: np.ndarray,
    p: float,
    null_label: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Replace each label by `null_label` with probability p."""
    labels = np.asarray(labels, dtype=np.int64)
    if p <= 0:
        return labels.copy()
    dropped = rng.random(labels.shape) < p
    return np.where(dropped, null_label, labels)


def random_flip(
    images: np.ndarray, rng: np.random.Generator, p: float = 0.5
) -> np.ndarray:
    """Mirror each (C, H, W) image along W with probability p."""
    flip = rng.random(images.shape[0]) < p
    out = images.copy()
    out[flip] = out[flip][..., ::-1]
    return out
