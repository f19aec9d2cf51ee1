"""
Image <-> patch conversion, mask sampling and fixed positional tables.

Patches are numbered row-major over the grid starting at 0. Inside a patch
the flattened vector runs over (pixel row, pixel column, channel), so
``patch[(r * p + c) * C + ch]`` is channel ``ch`` of pixel (r, c).
"""
from typing import Tuple

import numpy as np
import torch

from models.data_models import MaskBatch, MaskPlan, PatchSequence, PositionalTable
from utils.config import masked_count
from utils.errors import DegenerateRatioError, NonDivisibleSizeError, OddDimError


def patchify(image: np.ndarray, patch_size: int) -> PatchSequence:
    """
    Split an H x W x C image into non-overlapping flattened patches.

    Args:
        image: Array of shape (H, W, C)
        patch_size: Side of each square patch

    Returns:
        PatchSequence with N = (H/p)(W/p) rows of length p*p*C
    """
    height, width, chans = image.shape
    if height % patch_size or width % patch_size:
        raise NonDivisibleSizeError(
            f"image {height}x{width} is not divisible by patch size {patch_size}"
        )
    rows, cols = height // patch_size, width // patch_size
    patches = (
        image.reshape(rows, patch_size, cols, patch_size, chans)
        .transpose(0, 2, 1, 3, 4)
        .reshape(rows * cols, patch_size * patch_size * chans)
    )
    return PatchSequence(patches=patches, grid=(rows, cols), patch_size=patch_size)


def unpatchify(seq: PatchSequence) -> np.ndarray:
    """Inverse of patchify"""
    rows, cols = seq.grid
    p = seq.patch_size
    chans = seq.patch_dim // (p * p)
    return (
        seq.patches.reshape(rows, cols, p, p, chans)
        .transpose(0, 2, 1, 3, 4)
        .reshape(rows * p, cols * p, chans)
    )


def patchify_batch(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """Batched patchify for (B, H, W, C) tensors, same ordering as ``patchify``"""
    batch, height, width, chans = images.shape
    if height % patch_size or width % patch_size:
        raise NonDivisibleSizeError(
            f"image {height}x{width} is not divisible by patch size {patch_size}"
        )
    rows, cols = height // patch_size, width // patch_size
    return (
        images.reshape(batch, rows, patch_size, cols, patch_size, chans)
        .permute(0, 1, 3, 2, 4, 5)
        .reshape(batch, rows * cols, patch_size * patch_size * chans)
    )


def unpatchify_batch(patches: torch.Tensor, grid: Tuple[int, int], patch_size: int) -> torch.Tensor:
    batch = patches.shape[0]
    rows, cols = grid
    chans = patches.shape[-1] // (patch_size * patch_size)
    return (
        patches.reshape(batch, rows, cols, patch_size, patch_size, chans)
        .permute(0, 1, 3, 2, 4, 5)
        .reshape(batch, rows * patch_size, cols * patch_size, chans)
    )


def sample_mask(n_patches: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    """
    Draw round-half-up(ratio * n) masked patches uniformly without replacement.

    Args:
        n_patches: Number of patches N (>= 2)
        ratio: Mask ratio k in (0, 1)
        rng: Caller-owned generator

    Returns:
        MaskPlan with sorted visible and masked index arrays
    """
    n_masked = masked_count(n_patches, ratio)
    if n_patches < 2 or not 0.0 < ratio < 1.0 or not 1 <= n_masked <= n_patches - 1:
        raise DegenerateRatioError(
            f"ratio {ratio} masks {n_masked} of {n_patches} patches; "
            f"need between 1 and {n_patches - 1}"
        )
    perm = rng.permutation(n_patches)
    return MaskPlan(
        visible=np.sort(perm[n_masked:]),
        masked=np.sort(perm[:n_masked]),
        ratio=ratio,
    )


def sample_mask_batch(batch_size: int, n_patches: int, ratio: float, rng: np.random.Generator) -> MaskBatch:
    """Independent mask plans for every image of a batch"""
    return MaskBatch.stack([sample_mask(n_patches, ratio, rng) for _ in range(batch_size)])


def _sincos_1d(dim: int, positions: np.ndarray) -> np.ndarray:
    omega = np.arange(dim // 2, dtype=np.float64) / (dim / 2.0)
    omega = 1.0 / 10000 ** omega
    angles = np.einsum("m,d->md", positions.astype(np.float64), omega)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def positional_table(grid: Tuple[int, int], dim: int) -> PositionalTable:
    """
    Fixed 2D sine/cosine positional codes with a zero row for [CLS].

    The first half of the width encodes the grid row, the second half the
    column. Widths that are not a multiple of four give the row half the
    extra pair.
    """
    if dim % 2:
        raise OddDimError(f"positional width must be even, got {dim}")
    rows, cols = grid
    row_dim = 2 * ((dim + 2) // 4)
    col_dim = dim - row_dim
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    parts = [_sincos_1d(row_dim, rr.reshape(-1))]
    if col_dim:
        parts.append(_sincos_1d(col_dim, cc.reshape(-1)))
    table = np.concatenate([np.zeros((1, dim))] + [np.concatenate(parts, axis=1)], axis=0)
    return PositionalTable(table=table, grid=(rows, cols))
