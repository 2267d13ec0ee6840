"""Frozen feature teachers and the cosine alignment loss."""
from __future__ import annotations

import json
import logging
import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import IntegrityError, LookupFailure, ShapeError
from .tokenizer import MLP

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"PTFEAT01"


class FrozenConvTeacher(nn.Module):
    """Three stride-2 conv stages with seeded random weights, emitting an (H/8 x W/8) x C grid.

    Never trained; ``requires_grad`` is off for every parameter.
    """

    kind = "frozen-conv"

    def __init__(self, channels: int = 3, out_channels: int = 64, seed: int = 1234):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.net = nn.Sequential(
                nn.Conv2d(channels, 32, 3, stride=2, padding=1), nn.GELU(),
                nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.GELU(),
                nn.Conv2d(64, out_channels, 3, stride=2, padding=1),
            )
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, images: torch.Tensor, ids=None) -> torch.Tensor:
        """(B, C, H, W) in [0, 1] -> (B, L', C') patch features."""
        return self.net(images * 2 - 1).flatten(2).transpose(1, 2)


class FeatureFileTeacher(nn.Module):
    """Serves precomputed features (e.g. from a foundation model) looked up by image id."""

    kind = "feature-file"

    def __init__(self, path):
        super().__init__()
        self.path = Path(path)
        self.offsets, self.length, self.channels, self.payload = read_feature_file(path)

    def lookup(self, image_id) -> torch.Tensor:
        key = str(image_id)
        if key not in self.offsets:
            raise LookupFailure(f"no features for image id {key!r} in {self.path}")
        n = self.length * self.channels
        start = self.offsets[key]
        arr = self.payload[start:start + n].reshape(self.length, self.channels)
        return torch.from_numpy(arr.copy())

    def forward(self, images: torch.Tensor, ids=None) -> torch.Tensor:
        if ids is None:
            raise LookupFailure("feature-file teacher needs image ids")
        return torch.stack([self.lookup(i) for i in ids])


def write_feature_file(path, features: dict) -> None:
    """``features`` maps image id -> (L', C) array; all entries share one shape."""
    arrays = {str(k): np.asarray(v, dtype="<f4") for k, v in features.items()}
    shapes = {a.shape for a in arrays.values()}
    if len(shapes) != 1 or len(next(iter(shapes))) != 2:
        raise ShapeError("all feature grids must share one (L', C) shape")
    length, channels = shapes.pop()
    offsets, chunks, pos = {}, [], 0
    for key, arr in arrays.items():
        offsets[key] = pos
        chunks.append(arr.tobytes())
        pos += arr.size
    header = json.dumps({"L": length, "C": channels, "offsets": offsets}).encode()
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks))


def read_feature_file(path):
    raw = Path(path).read_bytes()
    if raw[:8] != FEATURE_MAGIC or len(raw) < 16:
        raise IntegrityError(f"{path} is not a feature file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + hlen])
    except ValueError as exc:
        raise IntegrityError(f"{path}: corrupt header") from exc
    payload = np.frombuffer(raw[16 + hlen:], dtype="<f4")
    need = len(header["offsets"]) * header["L"] * header["C"]
    if payload.size != need:
        raise IntegrityError(f"{path}: payload has {payload.size} floats, expected {need}")
    return header["offsets"], header["L"], header["C"], payload


def build_teacher(config) -> nn.Module:
    t = config.teacher
    if t.kind == "feature-file":
        return FeatureFileTeacher(t.path)
    return FrozenConvTeacher(config.channels, t.channels, t.seed)


def resample_positions(feats: torch.Tensor, length: int) -> torch.Tensor:
    """Nearest-neighbour resampling of a square (B, L, C) grid to ``length`` cells."""
    b, n, c = feats.shape
    if n == length:
        return feats
    src, dst = int(round(n**0.5)), int(round(length**0.5))
    if src * src != n or dst * dst != length:
        raise ShapeError("resampling needs square grids")
    grid = feats.transpose(1, 2).reshape(b, c, src, src)
    return F.interpolate(grid, size=(dst, dst), mode="nearest").flatten(2).transpose(1, 2)


def cosine_per_position(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity along the last axis; zero where either vector has zero norm."""
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    zero = (na == 0) | (nb == 0)
    if zero.any():
        log.warning("alignment: %d zero-norm positions scored as cosine 0", int(zero.sum()))
    denom = torch.where(zero, torch.ones_like(na), na * nb)
    return torch.where(zero, torch.zeros_like(na), (a * b).sum(-1) / denom)


class AlignmentHead(nn.Module):
    """Two-layer MLP projecting decoder features to the teacher's channel width."""

    def __init__(self, dim: int, teacher_channels: int):
        super().__init__()
        self.mlp = MLP(dim, dim, teacher_channels)

    def forward(self, feats):
        return self.mlp(feats)


def alignment_loss(projected: torch.Tensor, teacher: torch.Tensor) -> torch.Tensor:
    """Negative mean cosine similarity between projected decoder features and teacher features."""
    if projected.shape[-1] != teacher.shape[-1]:
        raise ShapeError(f"channel mismatch {projected.shape[-1]} vs {teacher.shape[-1]}")
    if projected.shape[1] != teacher.shape[1]:
        teacher = resample_positions(teacher, projected.shape[1])
    return -cosine_per_position(projected, teacher).mean()
