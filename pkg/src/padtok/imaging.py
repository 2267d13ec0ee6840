"""PNG output: image grids and wrapped heatmaps."""
from __future__ import annotations

import math

import numpy as np
import torch
from PIL import Image

# dark blue -> teal -> yellow, roughly viridis
_STOPS = np.array([[68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37]], dtype=np.float64)


def to_uint8(images) -> np.ndarray:
    """(..., C, H, W) tensors or (..., H, W, C) arrays in [0, 1] -> uint8 HWC."""
    if isinstance(images, (list, tuple)) and images and isinstance(images[0], torch.Tensor):
        images = torch.stack(list(images))
    if isinstance(images, torch.Tensor):
        images = images.detach().cpu().double().movedim(-3, -1).numpy()
    return (np.clip(images, 0, 1) * 255 + 0.5).astype(np.uint8)


def image_grid(rows, pad: int = 2, scale: int = 1) -> Image.Image:
    """``rows``: sequence of rows, each a sequence (or batch) of images; all the same size."""
    rows = [to_uint8(r) for r in rows]
    h, w, c = rows[0][0].shape
    ncol = max(len(r) for r in rows)
    canvas = np.full((len(rows) * (h + pad) + pad, ncol * (w + pad) + pad, c), 255, dtype=np.uint8)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            canvas[y:y + h, x:x + w] = img
    im = Image.fromarray(canvas.squeeze(-1) if c == 1 else canvas)
    if scale != 1:
        im = im.resize((im.width * scale, im.height * scale), Image.NEAREST)
    return im


def save_grid(path, rows, pad: int = 2, scale: int = 1) -> None:
    image_grid(rows, pad, scale).save(path)


def colormap(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    t = (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)
    pos = t * (len(_STOPS) - 1)
    i = np.clip(pos.astype(int), 0, len(_STOPS) - 2)
    frac = (pos - i)[..., None]
    return (_STOPS[i] * (1 - frac) + _STOPS[i + 1] * frac).astype(np.uint8)


def save_heatmap(path, weights, width: int | None = None, cell: int = 24) -> None:
    """Wrap a 1D per-position profile into rows of ``width`` cells (default sqrt(N))."""
    weights = np.asarray(weights, dtype=np.float64)
    width = width or max(1, math.isqrt(len(weights)))
    rows = math.ceil(len(weights) / width)
    padded = np.full(rows * width, np.nan)
    padded[:len(weights)] = weights
    grid = padded.reshape(rows, width)
    rgb = colormap(np.nan_to_num(grid, nan=np.nanmin(grid)))
    rgb[np.isnan(grid)] = 255
    Image.fromarray(rgb).resize((width * cell, rows * cell), Image.NEAREST).save(path)
