"""Binary PGM (P5) and PPM (P6) images, 8-bit only."""

import math
import re
from pathlib import Path

import numpy as np
import numpy.typing as npt

from tarflow.errors import ImageFormatError, ShapeMismatchError

_TOKEN = re.compile(rb"(#[^\n]*\n)|(\s+)|([^\s#]+)")


def quantize(x: npt.ArrayLike) -> np.ndarray:
    """[-1, 1] to bytes by round-half-up of (x + 1)·127.5."""
    x = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    return np.floor((x + 1.0) * 127.5 + 0.5).astype(np.uint8)


def encode_pnm(image: npt.ArrayLike) -> bytes:
    """(C, H, W) image in [-1, 1], C ∈ {1, 3}, to P5/P6 bytes."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ShapeMismatchError("write_image", image.shape, ("1|3", "H", "W"))
    c, h, w = image.shape
    magic = b"P5" if c == 1 else b"P6"
    raster = quantize(image).transpose(1, 2, 0)
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + raster.tobytes()


def write_image(image: npt.ArrayLike, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_pnm(image))
    return path


def make_grid(images: npt.ArrayLike, padding: int = 1) -> np.ndarray:
    """Tile (B, C, H, W) images into one (C, H', W') image, padded with -1."""
    images = np.asarray(images)
    b, c, h, w = images.shape
    cols = math.ceil(math.sqrt(b))
    rows = math.ceil(b / cols)
    grid = np.full(
        (c, rows * (h + padding) + padding, cols * (w + padding) + padding),
        -1.0,
    )
    for i, image in enumerate(images):
        r, k = divmod(i, cols)
        top = padding + r * (h + padding)
        left = padding + k * (w + padding)
        grid[:, top : top + h, left : left + w] = image
    return grid


def decode_pnm(data: bytes) -> np.ndarray:
    """P5/P6 bytes to a (C, H, W) uint8 array."""
    fields: list[int] = []
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {magic!r}", 0)
    pos = 2
    while len(fields) < 3:
        match = _TOKEN.match(data, pos)
        if match is None:
            raise ImageFormatError("truncated header", pos)
        if match.group(3) is not None:
            try:
                fields.append(int(match.group(3)))
            except ValueError:
                raise ImageFormatError(
                    f"non-numeric header field {match.group(3)!r}", pos
                ) from None
        pos = match.end()
    width, height, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"maxval {maxval}, only 255 supported", pos)
    # a single whitespace byte separates the header from the raster
    pos += 1
    c = 1 if magic == b"P5" else 3
    size = width * height * c
    if len(data) - pos < size:
        raise ImageFormatError(
            f"raster needs {size} bytes, found {len(data) - pos}", pos
        )
    raster = np.frombuffer(data, dtype=np.uint8, count=size, offset=pos)
    return raster.reshape(height, width, c).transpose(2, 0, 1).copy()


def read_image(path: Path) -> np.ndarray:
    return decode_pnm(Path(path).read_bytes())
