"""IDX (MNIST-style) unsigned-byte tensors.

    u8 0 | u8 0 | u8 type (0x08 = unsigned byte) | u8 ndim |
    ndim big-endian u32 dims | row-major data
"""

import logging
import struct
from pathlib import Path

import numpy as np

from tarflow.errors import IdxFormatError

logger = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
UBYTE = 0x08


def parse_idx(data: bytes, expected_magic: int | None = None) -> np.ndarray:
    if len(data) < 4:
        raise IdxFormatError("file shorter than the 4-byte magic", len(data))
    zero0, zero1, dtype, ndim = data[:4]
    if zero0 != 0 or zero1 != 0:
        raise IdxFormatError("magic must start with two zero bytes", 0)
    if dtype != UBYTE:
        raise IdxFormatError(
            f"unsupported element type 0x{dtype:02x}, expected 0x08", 2
        )
    magic = struct.unpack(">I", data[:4])[0]
    if expected_magic is not None and magic != expected_magic:
        raise IdxFormatError(
            f"magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0
        )
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise IdxFormatError(
            f"truncated header, {ndim} dimensions declared", len(data)
        )
    dims = struct.unpack(f">{ndim}I", data[4:header_end])
    for i, dim in enumerate(dims):
        if dim == 0:
            raise IdxFormatError(f"dimension {i} is zero", 4 + 4 * i)
    size = int(np.prod(dims, dtype=np.int64))
    if len(data) - header_end != size:
        raise IdxFormatError(
            f"expected {size} data bytes for dims {dims}, "
            f"found {len(data) - header_end}",
            header_end,
        )
    return np.frombuffer(data, dtype=np.uint8, offset=header_end).reshape(
        dims
    )


def read_idx_images(path: Path) -> np.ndarray:
    """(M, H, W) or (M, C, H, W) byte images as (M, C, H, W) uint8."""
    array = parse_idx(Path(path).read_bytes())
    if array.ndim == 3:
        array = array[:, None]
    elif array.ndim != 4:
        raise IdxFormatError(
            f"image file must have 3 or 4 dimensions, got {array.ndim}", 3
        )
    logger.debug(f"[idx] read {array.shape} images from {path}")
    return array


def read_idx_labels(path: Path) -> np.ndarray:
    array = parse_idx(Path(path).read_bytes(), expected_magic=LABELS_MAGIC)
    return array.astype(np.int64)
