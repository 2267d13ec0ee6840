"""Checkpoint files: a JSON manifest followed by one contiguous little-endian payload.

Layout::

    b"PADTOKCK" | u64 header length | header JSON | payload

The header lists every tensor's name, shape, dtype and byte offset into the
payload, plus the component tag, step counter, RNG state, config snapshot
and a SHA-256 of the payload.
"""
from __future__ import annotations

import base64
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import ExperimentConfig, config_from_dict
from .errors import ComponentMismatch, IntegrityError

log = logging.getLogger(__name__)

MAGIC = b"PADTOKCK"
COMPONENTS = ("tokenizer", "decoder-only", "ar-model")
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8", torch.uint8: "|u1"}
_TORCH = {v: k for k, v in _DTYPES.items()}


@dataclass
class CheckpointState:
    component: str
    tensors: dict
    config: ExperimentConfig
    rng_state: Optional[bytes] = None
    step: int = 0
    config_mismatch: list = field(default_factory=list)

    def __post_init__(self):
        if self.component not in COMPONENTS:
            raise ValueError(f"unknown component tag {self.component!r}")


def _encode(state: CheckpointState) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(state.tensors):
        t = state.tensors[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise TypeError(f"unsupported dtype {t.dtype} for {name}")
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": _DTYPES[t.dtype],
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format": 1,
        "component": state.component,
        "step": state.step,
        "config": state.config.to_dict(),
        "rng_state": base64.b64encode(state.rng_state).decode() if state.rng_state is not None else None,
        "tensors": entries,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + payload


def save_checkpoint(state: CheckpointState, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(_encode(state))
    tmp.replace(path)


def config_diff(a: ExperimentConfig, b: ExperimentConfig) -> list[str]:
    """Dotted keys whose values differ between two configs."""
    out = []

    def walk(x, y, prefix):
        for key in sorted(set(x) | set(y)):
            vx, vy = x.get(key), y.get(key)
            if isinstance(vx, dict) and isinstance(vy, dict):
                walk(vx, vy, f"{prefix}{key}.")
            elif vx != vy:
                out.append(f"{prefix}{key}")

    walk(a.to_dict(), b.to_dict(), "")
    return out


def load_checkpoint(path, component: str | tuple | None = None,
                    current: ExperimentConfig | None = None) -> CheckpointState:
    """Read and verify a checkpoint.

    ``component`` restricts the accepted tag(s). When ``current`` is given,
    keys where it differs from the stored snapshot are logged and recorded
    in ``config_mismatch``; the stored snapshot is returned unchanged.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise IntegrityError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:16 + hlen])
    except ValueError as exc:
        raise IntegrityError(f"{path}: corrupt header") from exc
    payload = raw[16 + hlen:]
    if len(payload) != header.get("payload_bytes"):
        raise IntegrityError(f"{path}: payload is {len(payload)} bytes, expected {header.get('payload_bytes')}")
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise IntegrityError(f"{path}: payload checksum mismatch")
    tag = header["component"]
    allowed = (component,) if isinstance(component, str) else component
    if allowed is not None and tag not in allowed:
        raise ComponentMismatch(f"{path}: holds a {tag!r} checkpoint, expected {' or '.join(allowed)}")
    tensors = {}
    for e in header["tensors"]:
        arr = np.frombuffer(payload, dtype=e["dtype"], count=e["nbytes"] // np.dtype(e["dtype"]).itemsize,
                            offset=e["offset"]).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    rng = header.get("rng_state")
    state = CheckpointState(tag, tensors, config_from_dict(header["config"]),
                            base64.b64decode(rng) if rng is not None else None, header["step"])
    if current is not None:
        state.config_mismatch = config_diff(state.config, current)
        if state.config_mismatch:
            log.warning("checkpoint %s config differs from current run in: %s", path,
                        ", ".join(state.config_mismatch))
    return state
