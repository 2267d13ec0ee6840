"""Class-conditional decoder-only transformer over tokenizer codes."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ExperimentConfig
from .errors import DataError, RangeError
from .tokenizer import MLP, Attention
from .training import BatchStream, learning_rate_at, make_optimizer


class CausalBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm_attn = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm_mlp = nn.LayerNorm(dim)
        self.mlp = MLP(dim, 4 * dim)

    def forward(self, x, mask):
        x = x + self.attn(self.norm_attn(x), mask=mask)
        return x + self.mlp(self.norm_mlp(x))


class ArModel(nn.Module):
    """Position 0 holds the class embedding; position t > 0 holds code t.

    Logits at position t predict code t + 1. Class id ``class_count`` is the
    reserved null class used for unconditional logits.
    """

    def __init__(self, codebook_size: int, class_count: int, seq_len: int,
                 depth: int = 4, heads: int = 4, width: int = 128):
        super().__init__()
        self.codebook_size = codebook_size
        self.class_count = class_count
        self.seq_len = seq_len
        self.null_class = class_count
        self.tok_emb = nn.Embedding(codebook_size, width)
        self.cls_emb = nn.Embedding(class_count + 1, width)
        self.pos_emb = nn.Parameter(torch.randn(seq_len + 1, width) * 0.02)
        self.blocks = nn.ModuleList(CausalBlock(width, heads) for _ in range(depth))
        self.norm = nn.LayerNorm(width)
        self.head = nn.Linear(width, codebook_size)
        nn.init.normal_(self.tok_emb.weight, std=0.02)
        nn.init.normal_(self.cls_emb.weight, std=0.02)
        nn.init.normal_(self.head.weight, std=0.02)
        nn.init.zeros_(self.head.bias)

    def forward(self, labels: torch.Tensor, codes: torch.Tensor) -> torch.Tensor:
        """``labels`` (B,), ``codes`` (B, T) with T < seq_len + 1 -> logits (B, T + 1, K)."""
        x = torch.cat([self.cls_emb(labels)[:, None], self.tok_emb(codes)], dim=1)
        t = x.shape[1]
        if t > self.pos_emb.shape[0]:
            raise RangeError(f"sequence of {t} exceeds context {self.pos_emb.shape[0]}")
        x = x + self.pos_emb[:t]
        mask = torch.ones(t, t, dtype=torch.bool).tril()
        for block in self.blocks:
            x = block(x, mask)
        return self.head(self.norm(x))


def build_ar_model(config: ExperimentConfig, class_count: int) -> ArModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed + 2)
        return ArModel(config.codebook_size, class_count, config.num_tokens_n,
                       config.ar.depth, config.ar.heads, config.ar.width)


def ar_loss(model: ArModel, codes: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Teacher-forced next-token cross-entropy over all positions."""
    if codes.numel() and (codes.min() < 0 or codes.max() >= model.codebook_size):
        raise DataError(f"codes must lie in [0, {model.codebook_size})")
    logits = model(labels, codes[:, :-1])
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), codes.reshape(-1))


def drop_labels(labels: torch.Tensor, null_class: int, p: float, rng: torch.Generator) -> torch.Tensor:
    drop = torch.rand(labels.shape, generator=rng) < p
    return torch.where(drop, torch.full_like(labels, null_class), labels)


def ar_train_step(model: ArModel, optimizer, codes, labels, rng: torch.Generator,
                  label_dropout: float = 0.1) -> float:
    model.train()
    loss = ar_loss(model, codes, drop_labels(labels, model.null_class, label_dropout, rng))
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


class ArTrainer:
    def __init__(self, config: ExperimentConfig, model: ArModel, tokens, total_steps: int | None = None):
        self.config = config
        self.model = model
        self.tokens = tokens
        self.total_steps = config.ar.steps if total_steps is None else total_steps
        self.opt_config = config.phase_optimizer("ar")
        self.optimizer = make_optimizer(model.parameters(), self.opt_config)
        self.rng = torch.Generator().manual_seed(config.seed)
        self.batches = BatchStream(len(tokens), config.ar.batch_size, self.rng)
        self.step_count = 0

    def step(self) -> float:
        lr = learning_rate_at(self.step_count, self.total_steps, self.opt_config)
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        idx = self.batches.next()
        loss = ar_train_step(self.model, self.optimizer, self.tokens.codes[idx], self.tokens.labels[idx],
                             self.rng, self.config.ar.label_dropout)
        self.step_count += 1
        return loss

    def run(self, steps: int | None = None, log_file=None) -> list[float]:
        losses = []
        for _ in range(self.total_steps if steps is None else steps):
            losses.append(self.step())
            if log_file is not None:
                log_file.write(f'{{"step": {self.step_count}, "ce": {losses[-1]}}}\n')
        return losses


@torch.no_grad()
def mean_loss(model: ArModel, tokens, batch_size: int = 512) -> float:
    model.eval()
    total = 0.0
    for i in range(0, len(tokens), batch_size):
        c, l = tokens.codes[i:i + batch_size], tokens.labels[i:i + batch_size]
        total += float(ar_loss(model, c, l)) * len(c)
    return total / len(tokens)


@dataclass(frozen=True)
class CfgSchedule:
    scale: float
    free_fraction: float = 0.18

    def __post_init__(self):
        if self.scale < 0 or not 0 <= self.free_fraction < 1:
            raise RangeError(f"invalid CFG schedule {self}")


def cfg_scale_at(position: int, total_len: int, schedule: CfgSchedule) -> float:
    """1.0 for the first floor(free_fraction * total_len) positions, the guidance scale after."""
    if not 0 <= position < total_len:
        raise RangeError(f"position {position} outside [0, {total_len})")
    return 1.0 if position < math.floor(schedule.free_fraction * total_len) else schedule.scale


def cfg_logits(cond: torch.Tensor, uncond: torch.Tensor, s: float) -> torch.Tensor:
    # written as a convex-style blend so s=1 and s=0 return cond / uncond exactly
    return s * cond + (1 - s) * uncond


def _filter_top_k(logits: torch.Tensor, top_k: int) -> torch.Tensor:
    if top_k <= 0 or top_k >= logits.shape[-1]:
        return logits
    kth = logits.topk(top_k, dim=-1).values[..., -1:]
    return logits.masked_fill(logits < kth, float("-inf"))


@torch.no_grad()
def sample_sequence(model: ArModel, label: int, length: int, schedule: CfgSchedule,
                    rng: torch.Generator | None = None, temperature: float = 1.0, top_k: int = 0,
                    count: int = 1, always_uncond: bool = False) -> torch.Tensor:
    """Draw ``count`` sequences of ``length`` codes for class ``label``.

    The guidance step schedule is laid over the full ``model.seq_len``
    positions, so a shorter draw is a prefix of a full-length one.
    ``temperature == 0`` selects greedy decoding. ``always_uncond`` evaluates
    the unconditional branch even where the scale is 1.
    """
    if not 1 <= length <= model.seq_len:
        raise RangeError(f"length {length} outside [1, {model.seq_len}]")
    model.eval()
    labels = torch.full((count,), label, dtype=torch.long)
    nulls = torch.full((count,), model.null_class, dtype=torch.long)
    codes = torch.empty(count, 0, dtype=torch.long)
    for pos in range(length):
        logits = model(labels, codes)[:, -1]
        s = cfg_scale_at(pos, model.seq_len, schedule)
        if s != 1.0 or always_uncond:
            logits = cfg_logits(logits, model(nulls, codes)[:, -1], s)
        if temperature == 0:
            nxt = logits.argmax(-1)
        else:
            probs = _filter_top_k(logits / temperature, top_k).softmax(-1)
            nxt = torch.multinomial(probs, 1, generator=rng)[:, 0]
        codes = torch.cat([codes, nxt[:, None]], dim=1)
    return codes


def progressive_decode(codes: torch.Tensor, tokenizer, lengths, grid) -> dict:
    """Decoded images for each requested prefix length; lengths must lie on ``grid``."""
    out = {}
    with torch.no_grad():
        tokenizer.eval()
        for k in lengths:
            if k not in grid or k > codes.shape[1]:
                raise RangeError(f"length {k} is not on the grid {list(grid)} within {codes.shape[1]} codes")
            out[k] = tokenizer.decode_codes(codes[:, :k])
    return out
