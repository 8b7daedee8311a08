"""Patch extraction and token embedding (class token + position embeddings)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .pnm import read_pnm
from .tensor import ShapeError, Tensor


@dataclass
class ImageSample:
    pixels: np.ndarray  # (height, width, channels), floats in [0, 1]
    label: int = 0

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @classmethod
    def from_file(cls, path, label: int = 0) -> "ImageSample":
        return cls(read_pnm(path), label)


@dataclass
class TokenSequence:
    tokens: Tensor  # (N+1, D) or batched (B, N+1, D); row 0 is the class token
    grid: tuple[int, int]

    @property
    def num_patches(self) -> int:
        return self.grid[0] * self.grid[1]


def patch_grid(height: int, width: int, patch: int) -> tuple[int, int]:
    if height % patch or width % patch:
        raise ShapeError(f"image {height}x{width} is not divisible by patch size {patch}")
    return height // patch, width // patch


def patchify_batch(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) -> (B, N, P*P*C), patches row-major over the grid,
    each flattened in (row, col, channel) order."""
    b, h, w, c = images.shape
    gh, gw = patch_grid(h, w, patch)
    x = images.reshape(b, gh, patch, gw, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * gw, patch * patch * c)


def patchify(img: ImageSample, patch: int) -> np.ndarray:
    return patchify_batch(img.pixels[None], patch)[0]


def unpatchify(patches: np.ndarray, grid: tuple[int, int], patch: int, channels: int) -> np.ndarray:
    gh, gw = grid
    x = patches.reshape(gh, gw, patch, patch, channels).transpose(0, 2, 1, 3, 4)
    return x.reshape(gh * patch, gw * patch, channels)


def embed_tokens(patches, w_proj: Tensor, cls: Tensor, pos: Tensor) -> Tensor:
    """X = concat_rows(cls, patches @ W_proj) + pos. Works on (N, p) or (B, N, p)."""
    patches = T.as_tensor(patches, w_proj)
    n = patches.shape[-2]
    if patches.shape[-1] != w_proj.shape[0]:
        raise ShapeError(f"patch width {patches.shape[-1]} != projection rows {w_proj.shape[0]}")
    if pos.shape != (n + 1, w_proj.shape[1]) or cls.shape != (1, w_proj.shape[1]):
        raise ShapeError(
            f"cls {cls.shape} / pos {pos.shape} inconsistent with {n} patches of width {w_proj.shape[1]}"
        )
    body = patches @ w_proj
    head = cls if body.ndim == 2 else T.broadcast_to(cls, body.shape[:-2] + cls.shape)
    return T.concat([head, body], axis=-2) + pos
