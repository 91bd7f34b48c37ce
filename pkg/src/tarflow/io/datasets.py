"""Dataset ingestion: IDX files, PGM/PPM directories and synthetic
generators, all delivered as [-1, 1] images."""

import logging
import re
from pathlib import Path

import numpy as np

from tarflow.entities.dataset import Dataset
from tarflow.errors import ConfigError, ImageFormatError

from .idx import read_idx_images, read_idx_labels
from .pnm import read_image

logger = logging.getLogger(__name__)

_GENERATOR = re.compile(r"^(?P<name>[a-z0-9_]+)\((?P<args>[^)]*)\)$")
_PNM_SUFFIXES = {".pgm", ".ppm", ".pnm"}


def scale_bytes(pixels: np.ndarray) -> np.ndarray:
    """0..255 to [-1, 1]."""
    return np.asarray(pixels, dtype=np.float64) / 127.5 - 1.0


def center_crop(images: np.ndarray, side: int | None = None) -> np.ndarray:
    """Crop (..., H, W) to the centred side x side square, min(H, W) by
    default."""
    h, w = images.shape[-2:]
    side = side or min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    return images[..., top : top + side, left : left + side]


def gaussian2d(
    sigma: float, count: int, rng: np.random.Generator
) -> np.ndarray:
    """Points of N(0, σ²·I₂) as (count, 1, 1, 2) images."""
    return rng.normal(0.0, sigma, size=(count, 1, 1, 2))


def checkerboard2d(count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform over the dark cells of a 4×4 checkerboard on [-1, 1]²."""
    x1 = rng.uniform(-1.0, 1.0, size=count)
    col = np.minimum(np.floor((x1 + 1.0) / 0.5), 3).astype(np.int64)
    row = 2 * rng.integers(0, 2, size=count) + col % 2
    x2 = -1.0 + 0.5 * row + rng.uniform(0.0, 0.5, size=count)
    return np.stack([x1, x2], axis=1).reshape(count, 1, 1, 2)


def textures(
    height: int,
    width: int,
    count: int,
    seed: int,
    classes: int = 1,
) -> tuple[np.ndarray, np.ndarray | None]:
    """8-bit grey stripe textures as (count, 1, H, W) bytes.

    Class 0 stripes run horizontally and class 1 vertically; with one
    class each image picks an orientation at random. Frequency and phase
    vary per image.
    """
    rng = np.random.default_rng(seed)
    if classes == 2:
        labels = rng.integers(0, 2, size=count)
        vertical = labels == 1
    elif classes == 1:
        labels = None
        vertical = rng.random(count) < 0.5
    else:
        raise ConfigError("dataset", "textures supports 1 or 2 classes")
    ys, xs = np.meshgrid(
        np.arange(height) / height, np.arange(width) / width, indexing="ij"
    )
    freq = rng.uniform(1.0, 2.0, size=(count, 1, 1))
    phase = rng.uniform(0.0, 2 * np.pi, size=(count, 1, 1))
    coord = np.where(vertical[:, None, None], xs[None], ys[None])
    wave = 0.7 * np.sin(2 * np.pi * freq * coord + phase)
    wave += rng.normal(0.0, 0.05, size=wave.shape)
    pixels = np.floor((np.clip(wave, -1, 1) + 1.0) * 127.5 + 0.5)
    return pixels.astype(np.uint8)[:, None], labels


def _read_pnm_directory(path: Path) -> np.ndarray:
    files = sorted(p for p in path.iterdir() if p.suffix in _PNM_SUFFIXES)
    if not files:
        raise ImageFormatError(f"no PGM/PPM images in {path}", 0)
    images = [center_crop(read_image(f)) for f in files]
    shapes = {img.shape for img in images}
    if len(shapes) != 1:
        side = min(img.shape[-1] for img in images)
        images = [center_crop(img, side) for img in images]
    return np.stack(images)


def _parse_args(raw: str) -> list[float]:
    raw = raw.strip()
    if not raw:
        return []
    return [float(arg) for arg in raw.split(",")]


def _generate(
    name: str, args: list[float], count: int, seed: int
) -> Dataset:
    rng = np.random.default_rng(seed)
    spec = f"{name}({','.join(f'{a:g}' for a in args)})"
    if name == "gaussian2d":
        sigma = args[0] if args else 0.5
        return Dataset(name=spec, images=gaussian2d(sigma, count, rng))
    if name == "checkerboard2d":
        return Dataset(name=spec, images=checkerboard2d(count, rng))
    if name == "textures":
        if len(args) < 2:
            raise ConfigError(
                "dataset", "textures needs textures(H,W[,seed[,classes]])"
            )
        height, width = int(args[0]), int(args[1])
        tex_seed = int(args[2]) if len(args) > 2 else seed
        classes = int(args[3]) if len(args) > 3 else 1
        pixels, labels = textures(height, width, count, tex_seed, classes)
        return Dataset(
            name=spec,
            images=scale_bytes(pixels),
            labels=labels,
            num_classes=2 if labels is not None else 0,
        )
    raise ConfigError(
        "dataset",
        f"unknown generator '{name}', expected gaussian2d(sigma), "
        "checkerboard2d() or textures(H,W,seed[,classes])",
    )


def ingest_dataset(
    spec: str,
    count: int = 1024,
    seed: int = 0,
    labels_path: str | Path | None = None,
) -> Dataset:
    """Load or generate a dataset.

    `spec` is a generator call such as `gaussian2d(0.5)`, a directory of
    PGM/PPM images, or an IDX image file (magic 0x00000803).
    """
    spec = spec.strip()
    if spec == "checkerboard2d":
        spec = "checkerboard2d()"
    match = _GENERATOR.match(spec)
    if match and not Path(spec).exists():
        try:
            args = _parse_args(match.group("args"))
        except ValueError:
            raise ConfigError(
                "dataset", f"non-numeric generator arguments in '{spec}'"
            ) from None
        dataset = _generate(match.group("name"), args, count, seed)
    else:
        path = Path(spec)
        if path.is_dir():
            pixels = _read_pnm_directory(path)
        elif path.is_file():
            pixels = center_crop(read_idx_images(path))
        else:
            raise ConfigError("dataset", f"no such file or directory: {spec}")
        dataset = Dataset(name=str(path), images=scale_bytes(pixels))
    if labels_path is not None:
        labels = read_idx_labels(Path(labels_path))
        dataset = Dataset(
            name=dataset.name, images=dataset.images, labels=labels
        )
    classes = ""
    if dataset.labels is not None:
        classes = f", {dataset.num_classes} classes"
    logger.info(
        f"[dataset] {dataset.name}: {len(dataset)} images of "
        f"{dataset.image_shape}{classes}"
    )
    return dataset
