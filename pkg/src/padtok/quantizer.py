"""Nearest-neighbour vector quantization with a straight-through estimator."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import RangeError, ShapeError


@dataclass
class QuantizedSequence:
    codes: torch.Tensor  # (B, T) int64
    embeddings: torch.Tensor  # (B, T, d)
    retained_k: int

    def __len__(self) -> int:
        return self.codes.shape[1]


class _StraightThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, latents, quantized):
        return quantized.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def straight_through(latents: torch.Tensor, quantized: torch.Tensor) -> torch.Tensor:
    """Forward value is ``quantized`` exactly; gradients pass to ``latents`` unchanged."""
    if latents.shape != quantized.shape:
        raise ShapeError(f"shape mismatch {tuple(latents.shape)} vs {tuple(quantized.shape)}")
    return _StraightThrough.apply(latents, quantized.detach())


def vq_loss(latents: torch.Tensor, embeddings: torch.Tensor, beta: float = 0.25) -> torch.Tensor:
    """Codebook term plus ``beta`` times commitment term, averaged over positions."""
    if latents.shape != embeddings.shape:
        raise ShapeError(f"shape mismatch {tuple(latents.shape)} vs {tuple(embeddings.shape)}")
    codebook = (latents.detach() - embeddings).pow(2).sum(-1)
    commit = (latents - embeddings.detach()).pow(2).sum(-1)
    return (codebook + beta * commit).mean()


def nearest_codes(latents: torch.Tensor, entries: torch.Tensor) -> torch.Tensor:
    """Argmin of squared distance; ties resolve to the lowest index."""
    if latents.shape[-1] != entries.shape[-1]:
        raise ShapeError(f"latent dim {latents.shape[-1]} != codebook dim {entries.shape[-1]}")
    flat = latents.reshape(-1, latents.shape[-1]).detach().double()
    table = entries.detach().double()
    codes = torch.empty(flat.shape[0], dtype=torch.long)
    # chunked to bound the (rows, K, d) difference tensor
    for start in range(0, flat.shape[0], 256):
        diff = flat[start:start + 256, None, :] - table[None]
        codes[start:start + 256] = diff.pow(2).sum(-1).argmin(-1)
    return codes.reshape(latents.shape[:-1])


class VectorQuantizer(nn.Module):
    """Codebook of ``codebook_size`` x ``latent_dim`` entries.

    With ``l2_norm`` the lookup table and the latents are unit-normalized
    before the nearest-neighbour search, which keeps codebook usage spread
    out on small models.
    """

    def __init__(self, codebook_size: int, latent_dim: int, beta: float = 0.25, l2_norm: bool = False):
        super().__init__()
        self.beta = beta
        self.l2_norm = l2_norm
        self.entries = nn.Parameter(torch.randn(codebook_size, latent_dim) / math.sqrt(latent_dim))
        self.register_buffer("usage_counts", torch.zeros(codebook_size, dtype=torch.long))

    @property
    def codebook_size(self) -> int:
        return self.entries.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.entries.shape[1]

    def table(self) -> torch.Tensor:
        return F.normalize(self.entries, dim=-1) if self.l2_norm else self.entries

    def project(self, latents: torch.Tensor) -> torch.Tensor:
        """Map encoder outputs into the space the table lives in."""
        return F.normalize(latents, dim=-1) if self.l2_norm else latents

    def lookup(self, codes: torch.Tensor) -> torch.Tensor:
        if codes.numel() and (codes.min() < 0 or codes.max() >= self.codebook_size):
            raise RangeError(f"codes must lie in [0, {self.codebook_size})")
        return self.table()[codes]

    def codes_for(self, latents: torch.Tensor) -> torch.Tensor:
        """Nearest codes for already-projected latents; usage counts untouched."""
        return nearest_codes(latents, self.table())

    def quantize(self, latents: torch.Tensor) -> QuantizedSequence:
        """Nearest entries for already-projected latents; increments usage counts."""
        table = self.table()
        codes = nearest_codes(latents, table)
        with torch.no_grad():
            self.usage_counts += torch.bincount(codes.flatten(), minlength=self.codebook_size)
        return QuantizedSequence(codes, table[codes], codes.shape[-1])

    forward = quantize


def truncate(seq: QuantizedSequence, k: int) -> QuantizedSequence:
    """Keep the first ``k`` tokens."""
    if not 1 <= k <= len(seq):
        raise RangeError(f"k={k} outside [1, {len(seq)}]")
    return replace(seq, codes=seq.codes[:, :k], embeddings=seq.embeddings[:, :k], retained_k=k)
