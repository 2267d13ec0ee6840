"""Token-sequence files for AR training.

Little-endian layout: header ``b"PTOK" | u32 N | u32 K | u32 count``, then per
sample ``u16 label | N x u16 codes``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import DataError, IntegrityError

TOKEN_MAGIC = b"PTOK"
_HEADER = struct.Struct("<4sIII")


@dataclass
class TokenSet:
    codes: torch.Tensor  # (count, N) int64
    labels: torch.Tensor  # (count,) int64
    codebook_size: int

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def length(self) -> int:
        return self.codes.shape[1]


def write_token_file(path, codes, labels, codebook_size: int) -> None:
    codes = np.asarray(codes, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if codes.ndim != 2 or len(codes) != len(labels):
        raise DataError("codes must be (count, N) with one label per row")
    if codes.size and (codes.min() < 0 or codes.max() >= codebook_size):
        raise DataError(f"codes must lie in [0, {codebook_size})")
    if labels.size and (labels.min() < 0 or labels.max() > 0xFFFF):
        raise DataError("labels must fit in u16")
    rows = np.concatenate([labels[:, None], codes], axis=1).astype("<u2")
    Path(path).write_bytes(_HEADER.pack(TOKEN_MAGIC, codes.shape[1], codebook_size, len(codes)) + rows.tobytes())


def read_token_file(path) -> TokenSet:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise IntegrityError(f"{path}: truncated header")
    magic, n, k, count = _HEADER.unpack_from(raw)
    if magic != TOKEN_MAGIC:
        raise IntegrityError(f"{path}: not a token file")
    body = raw[_HEADER.size:]
    if len(body) != count * (n + 1) * 2:
        raise IntegrityError(f"{path}: expected {count} records of {n} codes")
    rows = np.frombuffer(body, dtype="<u2").reshape(count, n + 1).astype(np.int64)
    if rows[:, 1:].size and rows[:, 1:].max() >= k:
        raise DataError(f"{path}: code >= codebook size {k}")
    return TokenSet(torch.from_numpy(rows[:, 1:].copy()), torch.from_numpy(rows[:, 0].copy()), k)
