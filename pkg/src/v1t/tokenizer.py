"""Image-to-token embedding: the four patch encoders plus positions.

All four methods produce ``[batch, tokens(+1 cls), embed_dim]`` where the
token count follows the floor formula ``((size - patch) // stride + 1)``
per axis; windows that would overrun the image are dropped.  The grid
must satisfy rows <= cols so the core output can be reshaped for the
readout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import CoreConfig
from .exceptions import ConfigError, DimensionError
from .tensor import (Tensor, broadcast_to, concat, dropout, extract_patches,
                     maxpool3x3_same, pad, relu, truncated_normal)


@dataclass(frozen=True)
class PatchGrid:
    rows: int
    cols: int

    @property
    def tokens(self) -> int:
        return self.rows * self.cols


def patch_grid(h: int, w: int, cfg: CoreConfig) -> PatchGrid:
    p, s = cfg.patch_size, cfg.patch_stride
    if p > h or p > w:
        raise ConfigError(f"patch size {p} exceeds image {h}x{w}")
    rows = (h - p) // s + 1
    cols = (w - p) // s + 1
    if rows < 1 or cols < 1:
        raise ConfigError("patch grid is empty")
    if rows > cols:
        raise ConfigError(f"patch grid {rows}x{cols} violates rows <= cols; "
                          "wider-than-tall feature maps are required downstream")
    return PatchGrid(rows, cols)


def _shift2d(x: Tensor, dy: int, dx: int) -> Tensor:
    """out[y, x] = in[y-dy, x-dx] with zero fill; trailing two axes."""
    lead = x.ndim - 2
    h, w = x.shape[-2], x.shape[-1]
    widths = ((0, 0),) * lead + ((max(dy, 0), max(-dy, 0)), (max(dx, 0), max(-dx, 0)))
    padded = pad(x, widths)
    r0, c0 = max(-dy, 0), max(-dx, 0)
    key = (slice(None),) * lead + (slice(r0, r0 + h), slice(c0, c0 + w))
    return padded[key]


def spt_augment(img: Tensor, patch_size: int) -> Tensor:
    """Concatenate the image with its four diagonally shifted copies.

    Shift amount is floor(patch/2); channel groups are ordered
    [original, down-right, down-left, up-right, up-left].
    """
    a = patch_size // 2
    shifts = [(a, a), (a, -a), (-a, a), (-a, -a)]
    return concat([img] + [_shift2d(img, dy, dx) for dy, dx in shifts], axis=1)


def sinusoidal_table(n_positions: int, dim: int) -> np.ndarray:
    """Fixed sin/cos position table; row 0 is [0, 1, 0, 1, ...]."""
    pos = np.arange(n_positions)[:, None].astype(np.float64)
    half = (dim + 1) // 2
    freq = np.exp(-np.log(10000.0) * (2.0 * np.arange(half)) / dim)
    table = np.zeros((n_positions, 2 * half))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    return table[:, :dim]


def tokenizer_in_channels(cfg: CoreConfig, image_channels: int, n_behavior_channels: int) -> int:
    c = image_channels + n_behavior_channels
    if cfg.tokenizer == "spt":
        c *= 5
    return c


def init_tokenizer_params(params: dict, prefix: str, cfg: CoreConfig, in_channels: int,
                          grid: PatchGrid, rng: np.random.Generator, dtype) -> None:
    p, d = cfg.patch_size, cfg.embed_dim
    flat = in_channels * p * p
    if cfg.tokenizer in ("sliding_window", "spt"):
        params[f"{prefix}.w"] = Tensor(truncated_normal(rng, (flat, d), dtype=dtype), requires_grad=True)
    else:  # conv2d, cct
        params[f"{prefix}.kernel"] = Tensor(
            truncated_normal(rng, (d, in_channels, p, p), dtype=dtype), requires_grad=True)
    params[f"{prefix}.b"] = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
    if cfg.positional == "learned":
        params[f"{prefix}.pos"] = Tensor(
            truncated_normal(rng, (grid.tokens, d), dtype=dtype), requires_grad=True)
    if cfg.use_cls_token:
        params[f"{prefix}.cls"] = Tensor(truncated_normal(rng, (1, d), dtype=dtype), requires_grad=True)


def _project_patches(img: Tensor, cfg: CoreConfig, params: dict, prefix: str):
    """Patch extraction + projection for every method; returns ([B,l,d], grid)."""
    p, s = cfg.patch_size, cfg.patch_stride
    if cfg.tokenizer in ("sliding_window", "spt"):
        flat, (rows, cols) = extract_patches(img, p, s)
        z = flat @ params[f"{prefix}.w"] + params[f"{prefix}.b"]
    else:
        kernel = params[f"{prefix}.kernel"]
        d = kernel.shape[0]
        # convolution with kernel p, stride s == im2col followed by a matmul
        flat, (rows, cols) = extract_patches(img, p, s)
        weight = kernel.transpose(1, 2, 3, 0).reshape(kernel.shape[1] * p * p, d)
        z = flat @ weight + params[f"{prefix}.b"]
        if cfg.tokenizer == "cct":
            z = relu(z)
            fmap = z.reshape(z.shape[0], rows, cols, d).transpose(0, 3, 1, 2)
            fmap = maxpool3x3_same(fmap)  # stride-1, padded: token grid is preserved
            z = fmap.transpose(0, 2, 3, 1).reshape(z.shape[0], rows * cols, d)
    return z, PatchGrid(rows, cols)


def tokenize(img: Tensor, behaviors: Tensor | None, cfg: CoreConfig, params: dict,
             prefix: str, rng: np.random.Generator, train: bool):
    """Embed an image batch as a token sequence.

    behaviors, when given (vanilla-ViT mode), is [B, k]; each variable is
    duplicated to an h x w plane and concatenated on the channel axis
    before patching.  Returns (z0, grid) with z0 [B, l(+1), d].
    """
    if img.ndim != 4:
        raise DimensionError("tokenize expects [B, c, h, w] images")
    b, _, h, w = img.shape
    if behaviors is not None:
        planes = broadcast_to(behaviors.reshape(b, behaviors.shape[1], 1, 1),
                              (b, behaviors.shape[1], h, w))
        img = concat([img, planes], axis=1)
    if cfg.tokenizer == "spt":
        img = spt_augment(img, cfg.patch_size)
    expected = patch_grid(h, w, cfg)
    z, grid = _project_patches(img, cfg, params, prefix)
    if grid != expected:
        raise ConfigError(f"grid mismatch: {grid} vs {expected}")
    if cfg.positional == "learned":
        z = z + params[f"{prefix}.pos"]
    else:
        z = z + Tensor(sinusoidal_table(grid.tokens, cfg.embed_dim).astype(z.dtype))
    if cfg.use_cls_token:
        cls = broadcast_to(params[f"{prefix}.cls"].reshape(1, 1, cfg.embed_dim),
                           (b, 1, cfg.embed_dim))
        z = concat([cls, z], axis=1)
    z = dropout(z, cfg.patch_dropout, rng, train)
    return z, grid
