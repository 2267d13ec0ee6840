"""Datasets: synthetic parametric shapes and image folders.

Synthetic images are rasterized with integer arithmetic only, so a seed gives
byte-identical images on any platform.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import DataError, ShapeError

SHAPE_FAMILIES = ("circle", "square", "triangle", "diamond")


@dataclass
class Dataset:
    images: np.ndarray  # (count, H, W, C) uint8
    labels: np.ndarray  # (count,) int64
    class_count: int

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.dtype != np.uint8:
            raise ShapeError("images must be a uint8 array of shape (count, H, W, C)")
        if len(self.images) != len(self.labels):
            raise ShapeError("one label per image required")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_size(self) -> int:
        return self.images.shape[1]

    def tensor(self, index=None) -> torch.Tensor:
        """Images as float32 NCHW in [0, 1]."""
        arr = self.images if index is None else self.images[index]
        return torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2).float() / 255.0

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.images[index], self.labels[index], self.class_count)

    def split(self, holdout: int) -> tuple["Dataset", "Dataset"]:
        """Last ``holdout`` images form the held-out split."""
        if not 0 <= holdout < len(self):
            raise DataError(f"holdout must lie in [0, {len(self)})")
        cut = len(self) - holdout
        return self.subset(np.arange(cut)), self.subset(np.arange(cut, len(self)))

    def of_class(self, label: int) -> "Dataset":
        return self.subset(np.flatnonzero(self.labels == label))

    def save(self, path) -> None:
        np.savez(path, images=self.images, labels=self.labels, class_count=self.class_count)

    @classmethod
    def load(cls, path) -> "Dataset":
        with np.load(path) as f:
            return cls(f["images"], f["labels"].astype(np.int64), int(f["class_count"]))


def _shape_mask(family: str, size: int, cx: int, cy: int, r: int) -> np.ndarray:
    # doubled coordinates put pixel centres on odd integers
    coords = 2 * np.arange(size, dtype=np.int64) + 1
    dx = np.abs(coords[None, :] - 2 * cx)
    dy_signed = coords[:, None] - 2 * cy
    dy = np.abs(dy_signed)
    if family == "circle":
        return dx * dx + dy * dy <= 4 * r * r
    if family == "square":
        return (dx <= 2 * r) & (dy <= 2 * r)
    if family == "triangle":
        depth = dy_signed + 2 * r  # 0 at apex, 4r at base
        return (depth >= 0) & (depth <= 4 * r) & (2 * dx <= depth)
    if family == "diamond":
        return dx + dy <= 2 * r
    raise ValueError(family)


def generate_synthetic_dataset(count: int, class_count: int, seed: int,
                               image_size: int = 32, channels: int = 3) -> Dataset:
    """Parametric shapes, one family per class (cycling), random colours, position and scale."""
    if count <= 0:
        raise ValueError("count must be positive")
    if class_count < 1:
        raise ValueError("class_count must be >= 1")
    rng = np.random.default_rng(seed)
    images = np.empty((count, image_size, image_size, channels), dtype=np.uint8)
    labels = np.empty(count, dtype=np.int64)
    s = image_size
    for i in range(count):
        label = i % class_count if i < class_count else int(rng.integers(class_count))
        family = SHAPE_FAMILIES[label % len(SHAPE_FAMILIES)]
        outline = (label // len(SHAPE_FAMILIES)) % 2 == 1
        r = int(rng.integers(s // 6, s // 3 + 1))
        cx = int(rng.integers(r, s - r + 1))
        cy = int(rng.integers(r, s - r + 1))
        bg = rng.integers(0, 90, size=channels)
        fg = rng.integers(130, 256, size=channels)
        mask = _shape_mask(family, s, cx, cy, r)
        if outline:
            mask &= ~_shape_mask(family, s, cx, cy, max(r - 3, 0))
        img = np.broadcast_to(bg.astype(np.uint8), (s, s, channels)).copy()
        img[mask] = fg.astype(np.uint8)
        images[i] = img
        labels[i] = label
    return Dataset(images, labels, class_count)


def load_image_folder(root, image_size: int, channels: int = 3) -> Dataset:
    """One subdirectory per class, sorted by name; images resized to ``image_size``."""
    from PIL import Image

    root = Path(root)
    classes = sorted(p for p in root.iterdir() if p.is_dir())
    if not classes:
        raise DataError(f"no class folders under {root}")
    mode = {1: "L", 3: "RGB"}[channels]
    images, labels = [], []
    for label, folder in enumerate(classes):
        for f in sorted(folder.iterdir()):
            if f.suffix.lower() not in (".png", ".jpg", ".jpeg", ".bmp"):
                continue
            with Image.open(f) as im:
                im = im.convert(mode).resize((image_size, image_size), Image.BICUBIC)
                arr = np.asarray(im, dtype=np.uint8)
            images.append(arr.reshape(image_size, image_size, channels))
            labels.append(label)
    if not images:
        raise DataError(f"no images under {root}")
    return Dataset(np.stack(images), np.asarray(labels, dtype=np.int64), len(classes))


def load_dataset(config) -> Dataset:
    d = config.data
    if d.path:
        p = Path(d.path)
        ds = load_image_folder(p, config.image_size, config.channels) if p.is_dir() else Dataset.load(p)
    else:
        ds = generate_synthetic_dataset(d.count, d.class_count, d.seed,
                                        config.image_size, config.channels)
    if ds.images.shape[1:] != (config.image_size, config.image_size, config.channels):
        raise ShapeError(f"dataset images {ds.images.shape[1:]} do not match config")
    return ds
