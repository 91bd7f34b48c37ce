import numpy.typing as npt

from tarflow.entities.config import PatchGrid
from tarflow.errors import ShapeMismatchError
from tarflow.numerics import Tensor, as_tensor, getitem, reshape, transpose


def patchify(image: "Tensor | npt.ArrayLike", grid: PatchGrid) -> Tensor:
    """(C, H, W) or (B, C, H, W) images to (N, D) or (B, N, D) sequences.

    Patches are enumerated in raster order; within a patch the layout is
    channel-major, then row-major over pixels.
    """
    image = as_tensor(image)
    unbatched = image.ndim == 3
    if unbatched:
        image = reshape(image, (1, *image.shape))
    expected = (grid.channels, grid.height, grid.width)
    if image.ndim != 4 or image.shape[1:] != expected:
        raise ShapeMismatchError("patchify", image.shape, expected)
    b = image.shape[0]
    s = grid.patch_size
    rows, cols = grid.height // s, grid.width // s
    x = reshape(image, (b, grid.channels, rows, s, cols, s))
    x = transpose(x, (0, 2, 4, 1, 3, 5))
    seq = reshape(x, (b, grid.num_patches, grid.patch_dim))
    return seq[0] if unbatched else seq


def unpatchify(seq: "Tensor | npt.ArrayLike", grid: PatchGrid) -> Tensor:
    seq = as_tensor(seq)
    unbatched = seq.ndim == 2
    if unbatched:
        seq = reshape(seq, (1, *seq.shape))
    expected = (grid.num_patches, grid.patch_dim)
    if seq.ndim != 3 or seq.shape[1:] != expected:
        raise ShapeMismatchError("unpatchify", seq.shape, expected)
    b = seq.shape[0]
    s = grid.patch_size
    rows, cols = grid.height // s, grid.width // s
    x = reshape(seq, (b, rows, cols, grid.channels, s, s))
    x = transpose(x, (0, 3, 1, 4, 2, 5))
    image = reshape(x, (b, grid.channels, grid.height, grid.width))
    return image[0] if unbatched else image


def permute(seq: Tensor, block: int) -> Tensor:
    """Identity for block 0, sequence reversal for every later block.

    Both are involutions, so `permute` is also the inverse permutation.
    """
    seq = as_tensor(seq)
    if block == 0:
        return seq
    index = (Ellipsis, slice(None, None, -1), slice(None))
    return getitem(seq, index)
