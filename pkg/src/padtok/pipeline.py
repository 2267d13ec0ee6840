"""End-to-end phases shared by the CLI and the acceptance suite."""
from __future__ import annotations

import logging
from pathlib import Path

import torch

from .ar import ArModel, ArTrainer, build_ar_model
from .checkpoint import CheckpointState, load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .errors import DataError
from .tokenfile import TokenSet, write_token_file
from .training import (LossBreakdown, TokenizerState, TokenizerTrainer, export_codes,
                       new_tokenizer_state)

log = logging.getLogger(__name__)

TOKENIZER_TAGS = ("tokenizer", "decoder-only")


def _rng_bytes(rng: torch.Generator) -> bytes:
    return rng.get_state().numpy().tobytes()


def tokenizer_checkpoint(state: TokenizerState, config: ExperimentConfig, rng: torch.Generator | None,
                         component: str = "tokenizer") -> CheckpointState:
    return CheckpointState(component, state.state_dict(), config,
                           _rng_bytes(rng) if rng is not None else None, state.step)


def load_tokenizer(path, current: ExperimentConfig | None = None):
    """Tokenizer state plus the config it was trained with."""
    ck = load_checkpoint(path, TOKENIZER_TAGS, current)
    state = new_tokenizer_state(ck.config)
    state.load_state_dict(ck.tensors)
    state.step = ck.step
    return state, ck.config


def train_tokenizer(config: ExperimentConfig, dataset, steps: int | None = None, log_path=None,
                    state: TokenizerState | None = None):
    """Run the nested-dropout training phase; returns (state, breakdowns, trainer)."""
    state = state or new_tokenizer_state(config)
    trainer = TokenizerTrainer(config, state, dataset, "train", total_steps=steps)
    with _maybe_open(log_path) as f:
        trace = trainer.run(log_file=f)
    return state, trace, trainer


def finetune_decoder(config: ExperimentConfig, state: TokenizerState, dataset, steps: int | None = None,
                     log_path=None):
    trainer = TokenizerTrainer(config, state, dataset, "finetune", total_steps=steps)
    with _maybe_open(log_path) as f:
        trace = trainer.run(log_file=f)
    return state, trace, trainer


def export_tokens(state: TokenizerState, dataset, path=None) -> TokenSet:
    codes = export_codes(state.model, dataset.tensor())
    tokens = TokenSet(codes, torch.from_numpy(dataset.labels).long(), state.model.quantizer.codebook_size)
    if path is not None:
        write_token_file(path, codes.numpy(), dataset.labels, tokens.codebook_size)
    return tokens


def train_ar(config: ExperimentConfig, tokens: TokenSet, class_count: int, steps: int | None = None,
             log_path=None):
    if tokens.length != config.num_tokens_n:
        raise DataError(f"token file has {tokens.length} codes per sample, config expects {config.num_tokens_n}")
    model = build_ar_model(config, class_count)
    trainer = ArTrainer(config, model, tokens, total_steps=steps)
    with _maybe_open(log_path) as f:
        losses = trainer.run(log_file=f)
    return model, losses, trainer


def ar_checkpoint(model: ArModel, config: ExperimentConfig, rng, step: int) -> CheckpointState:
    tensors = dict(model.state_dict())
    tensors["meta.class_count"] = torch.tensor([model.class_count], dtype=torch.int64)
    return CheckpointState("ar-model", tensors, config, _rng_bytes(rng) if rng is not None else None, step)


def load_ar(path):
    ck = load_checkpoint(path, "ar-model")
    class_count = int(ck.tensors.pop("meta.class_count")[0])
    model = build_ar_model(ck.config, class_count)
    model.load_state_dict(ck.tensors)
    return model, ck.config


def read_trace(path) -> list[LossBreakdown]:
    return [LossBreakdown.from_log_line(line) for line in Path(path).read_text().splitlines() if line.strip()]


class _maybe_open:
    def __init__(self, path):
        self.path = path
        self.f = None

    def __enter__(self):
        if self.path is not None:
            Path(self.path).parent.mkdir(parents=True, exist_ok=True)
            self.f = open(self.path, "w")
        return self.f

    def __exit__(self, *exc):
        if self.f is not None:
            self.f.close()


__all__ = ["load_tokenizer", "tokenizer_checkpoint", "train_tokenizer", "finetune_decoder",
           "export_tokens", "train_ar", "ar_checkpoint", "load_ar", "read_trace", "save_checkpoint"]
