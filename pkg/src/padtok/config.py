"""Experiment configuration.

Configs are JSON documents. Top-level keys hold the tokenizer architecture
and schedule; the three training phases (``train``, ``finetune``, ``ar``)
carry their own step counts, batch sizes and optional optimizer overrides.
"""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .errors import ConfigError, ValidationError


@dataclass
class OptimizerConfig:
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.0
    schedule: str = "cosine"
    end_learning_rate: float = 5e-5
    warmup_iters: int = 0


@dataclass
class CfgConfig:
    scale: float = 1.0
    free_fraction: float = 0.18


@dataclass
class TeacherConfig:
    # "frozen-conv" builds a seeded random network; "feature-file" reads stored features
    kind: str = "frozen-conv"
    seed: int = 1234
    channels: int = 64
    path: Optional[str] = None


@dataclass
class DataConfig:
    count: int = 2000
    class_count: int = 4
    seed: int = 1
    holdout: int = 200
    path: Optional[str] = None


@dataclass
class PhaseConfig:
    steps: int = 600
    batch_size: int = 32
    optimizer: Optional[OptimizerConfig] = None


@dataclass
class ArConfig:
    depth: int = 4
    heads: int = 4
    width: int = 128
    steps: int = 1500
    batch_size: int = 64
    label_dropout: float = 0.1
    temperature: float = 1.0
    top_k: int = 0
    optimizer: Optional[OptimizerConfig] = None


@dataclass
class ExperimentConfig:
    image_size: int = 32
    channels: int = 3
    downsample_f: int = 8
    num_tokens_n: int = 16
    pad_tokens_m: int = 14
    dropout_step: int = 2
    lambda_start: float = 2.0
    lambda_end: float = 0.5
    codebook_size: int = 512
    latent_dim: int = 8
    embed_dim: int = 128
    encoder_depth: int = 4
    decoder_depth: int = 4
    heads: int = 4
    # decoder block whose mask-position outputs feed the alignment loss; 0 means depth // 2
    feature_layer: int = 0
    # any commitment weight collapses the desk codebook onto one entry early in training
    commitment_beta: float = 0.0
    codebook_l2_norm: bool = True
    perceptual_weight: float = 0.1
    # "hierarchical" uses the linear lambda(k) ramp, "fixed" pins lambda to lambda_end
    lambda_mode: str = "hierarchical"
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    cfg: CfgConfig = field(default_factory=CfgConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: PhaseConfig = field(default_factory=PhaseConfig)
    finetune: PhaseConfig = field(default_factory=lambda: PhaseConfig(steps=300))
    ar: ArConfig = field(default_factory=ArConfig)
    seed: int = 0

    @property
    def grid_side(self) -> int:
        return self.image_size // self.downsample_f

    @property
    def grid_length(self) -> int:
        return self.grid_side**2

    @property
    def total_tokens(self) -> int:
        return self.num_tokens_n + self.pad_tokens_m

    @property
    def k_min(self) -> int:
        return self.dropout_step

    @property
    def decoder_feature_layer(self) -> int:
        return self.feature_layer or self.decoder_depth // 2

    def phase_optimizer(self, phase: str) -> OptimizerConfig:
        override = getattr(self, phase).optimizer
        return override if override is not None else self.optimizer

    def validate(self) -> "ExperimentConfig":
        def need(cond, name, msg):
            if not cond:
                raise ValidationError(name, msg)

        need(self.dropout_step > 0, "dropout_step", "must be positive")
        need(self.num_tokens_n > 0 and self.num_tokens_n % self.dropout_step == 0,
             "num_tokens_n", f"must be a positive multiple of dropout_step={self.dropout_step}")
        need(self.pad_tokens_m >= 0, "pad_tokens_m", "must be >= 0")
        need(self.downsample_f > 0 and self.image_size % self.downsample_f == 0,
             "downsample_f", "image_size must be divisible by downsample_f")
        need(self.downsample_f & (self.downsample_f - 1) == 0,
             "downsample_f", "must be a power of two")
        need(self.num_tokens_n <= pyramid_capacity(self.grid_side),
             "num_tokens_n", f"exceeds pooling pyramid capacity {pyramid_capacity(self.grid_side)}")
        need(self.lambda_end > 0, "lambda_end", "must be > 0")
        need(self.lambda_start >= self.lambda_end, "lambda_start", "must be >= lambda_end")
        need(self.lambda_mode in ("hierarchical", "fixed"), "lambda_mode",
             "must be 'hierarchical' or 'fixed'")
        need(0 <= self.cfg.free_fraction < 1, "cfg.free_fraction", "must lie in [0, 1)")
        need(self.cfg.scale >= 0, "cfg.scale", "must be >= 0")
        need(self.codebook_size > 0, "codebook_size", "must be positive")
        need(self.codebook_size <= 65536, "codebook_size", "token files store codes as u16")
        need(self.latent_dim > 0, "latent_dim", "must be positive")
        need(self.embed_dim % self.heads == 0, "embed_dim", "must be divisible by heads")
        need(1 <= self.decoder_feature_layer <= self.decoder_depth, "feature_layer",
             "must lie within the decoder depth")
        need(self.teacher.kind in ("frozen-conv", "feature-file"), "teacher.kind",
             "must be 'frozen-conv' or 'feature-file'")
        need(self.teacher.kind != "feature-file" or self.teacher.path, "teacher.path",
             "required for feature-file teachers")
        need(self.data.class_count >= 1, "data.class_count", "must be >= 1")
        need(self.ar.width % self.ar.heads == 0, "ar.width", "must be divisible by ar.heads")
        need(0 <= self.ar.label_dropout < 1, "ar.label_dropout", "must lie in [0, 1)")
        for phase in ("train", "finetune", "ar"):
            opt = self.phase_optimizer(phase)
            need(opt.schedule in ("cosine", "constant"), f"{phase}.optimizer.schedule",
                 "must be 'cosine' or 'constant'")
            need(opt.learning_rate > 0, f"{phase}.optimizer.learning_rate", "must be positive")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def pyramid_capacity(side: int) -> int:
    """Number of cells in the 1x1, 2x2, 4x4, ... pooling pyramid over a side x side grid."""
    total, level = 0, 1
    while level < side:
        total += level * level
        level *= 2
    return total + side * side


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ValidationError(path or "<root>", "expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValidationError(f"{path}{sorted(unknown)[0]}", "unknown key")
    kwargs = {}
    for name, value in data.items():
        tp = hints[name]
        if typing.get_origin(tp) is typing.Union:
            args = [a for a in typing.get_args(tp) if a is not type(None)]
            if value is None:
                kwargs[name] = None
                continue
            tp = args[0]
        if dataclasses.is_dataclass(tp):
            kwargs[name] = _build(tp, value, f"{path}{name}.")
            continue
        if tp is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if tp in (int, float, str, bool) and not (isinstance(value, tp)
                                                  and (tp is bool or not isinstance(value, bool))):
            raise ValidationError(f"{path}{name}", f"expected {tp.__name__}, got {value!r}")
        kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "").validate()


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        line = text.splitlines()[exc.lineno - 1] if text.splitlines() else ""
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg} | {line.strip()}") from exc
    return config_from_dict(data)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), str(path))


def save_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(config.to_json() + "\n")


def reference_scale_config() -> ExperimentConfig:
    """256x256 setting with 256 tokens, 224 padding tokens and a 2.0 -> 0.5 ramp."""
    return ExperimentConfig(
        image_size=256, downsample_f=16, num_tokens_n=256, pad_tokens_m=224,
        dropout_step=32, lambda_start=2.0, lambda_end=0.5, codebook_size=16384,
        latent_dim=8, embed_dim=768, heads=12, encoder_depth=12, decoder_depth=12, commitment_beta=0.25,
        optimizer=OptimizerConfig(learning_rate=1e-4, end_learning_rate=1e-5),
        train=PhaseConfig(steps=0, batch_size=128), finetune=PhaseConfig(steps=0, batch_size=128),
    ).validate()
