"""Nested-dropout tokenizer training with redundant padding and a length-dependent alignment weight."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import torch

from .config import ExperimentConfig, OptimizerConfig
from .errors import NumericError, RangeError, ShapeError
from .quantizer import straight_through, truncate, vq_loss  # noqa: F401
from .teacher import AlignmentHead, FrozenConvTeacher, alignment_loss, build_teacher
from .tokenizer import FlexTokenizer, build_tokenizer


@dataclass(frozen=True)
class DropoutSchedule:
    k_min: int
    k_max: int
    step: int

    def __post_init__(self):
        if self.step <= 0 or self.k_min < 1 or self.k_max < self.k_min:
            raise RangeError(f"empty retained-length grid {self}")

    @property
    def grid(self) -> list[int]:
        return list(range(self.k_min, self.k_max + 1, self.step))

    @classmethod
    def from_config(cls, config: ExperimentConfig) -> "DropoutSchedule":
        return cls(config.k_min, config.total_tokens, config.dropout_step)


def sample_retained_length(rng: torch.Generator, schedule: DropoutSchedule) -> int:
    grid = schedule.grid
    return grid[int(torch.randint(len(grid), (1,), generator=rng))]


@dataclass(frozen=True)
class LambdaSchedule:
    lambda_start: float
    lambda_end: float
    k_min: int
    n: int
    fixed: bool = False

    @classmethod
    def from_config(cls, config: ExperimentConfig, fixed: bool | None = None) -> "LambdaSchedule":
        if fixed is None:
            fixed = config.lambda_mode == "fixed"
        return cls(config.lambda_start, config.lambda_end, config.k_min, config.num_tokens_n, fixed)

    def __call__(self, k: int) -> float:
        return lambda_schedule(k, self)


def lambda_schedule(k: int, sched: LambdaSchedule) -> float:
    """Linear from lambda_start at k_min to lambda_end at n, constant lambda_end beyond."""
    if k < sched.k_min:
        raise RangeError(f"k={k} below k_min={sched.k_min}")
    if sched.fixed or k >= sched.n or sched.n == sched.k_min:
        return sched.lambda_end
    if k == sched.k_min:
        return sched.lambda_start
    frac = (k - sched.k_min) / (sched.n - sched.k_min)
    return sched.lambda_start + (sched.lambda_end - sched.lambda_start) * frac


def pixel_recon_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error plus mean absolute error over all pixels."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"image shapes differ: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    diff = x_hat - x
    return diff.pow(2).mean() + diff.abs().mean()


def perceptual_proxy(x: torch.Tensor, x_hat: torch.Tensor, net) -> torch.Tensor:
    """Mean squared distance between frozen-network features of the two images."""
    return (net(x_hat) - net(x)).pow(2).mean()


@dataclass
class LossBreakdown:
    step: int
    k: int
    lam: float
    l_rec: float
    l_reg: float
    l_total: float
    pixel: float = 0.0
    perceptual: float = 0.0
    vq: float = 0.0

    def log_line(self) -> str:
        d = {"step": self.step, "k": self.k, "lambda": self.lam, "l_rec": self.l_rec,
             "l_reg": self.l_reg, "l_total": self.l_total, "pixel": self.pixel,
             "perceptual": self.perceptual, "vq": self.vq}
        return json.dumps(d)

    @classmethod
    def from_log_line(cls, line: str) -> "LossBreakdown":
        d = json.loads(line)
        d["lam"] = d.pop("lambda")
        return cls(**d)


def learning_rate_at(step: int, total: int, opt: OptimizerConfig) -> float:
    if step < opt.warmup_iters:
        return opt.learning_rate * (step + 1) / opt.warmup_iters
    if opt.schedule == "constant" or total <= opt.warmup_iters:
        return opt.learning_rate
    t = min(1.0, (step - opt.warmup_iters) / max(1, total - opt.warmup_iters))
    return opt.end_learning_rate + (opt.learning_rate - opt.end_learning_rate) * 0.5 * (1 + math.cos(math.pi * t))


def make_optimizer(params, opt: OptimizerConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=opt.learning_rate, betas=(opt.beta1, opt.beta2),
                             weight_decay=opt.weight_decay)


class BatchStream:
    """Shuffled minibatch indices, reshuffled each epoch from a shared generator."""

    def __init__(self, size: int, batch_size: int, rng: torch.Generator):
        self.size, self.batch_size, self.rng = size, min(batch_size, size), rng
        self._order, self._pos = None, size

    def next(self) -> torch.Tensor:
        if self._pos + self.batch_size > self.size:
            self._order = torch.randperm(self.size, generator=self.rng)
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


@dataclass
class TokenizerState:
    """Everything a tokenizer training phase mutates."""

    model: FlexTokenizer
    align_head: AlignmentHead
    step: int = 0
    extra: dict = field(default_factory=dict)

    def state_dict(self) -> dict:
        out = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        out.update({f"align_head.{k}": v for k, v in self.align_head.state_dict().items()})
        return out

    def load_state_dict(self, tensors: dict) -> None:
        self.model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
        self.align_head.load_state_dict(
            {k[11:]: v for k, v in tensors.items() if k.startswith("align_head.")})


def new_tokenizer_state(config: ExperimentConfig) -> TokenizerState:
    model = build_tokenizer(config)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed + 1)
        head = AlignmentHead(config.embed_dim, config.teacher.channels)
    return TokenizerState(model, head)


class TokenizerTrainer:
    """Runs ``train`` (full model, scheduled lambda) or ``finetune`` (decoder only, lambda_end) steps."""

    def __init__(self, config: ExperimentConfig, state: TokenizerState, dataset, mode: str = "train",
                 total_steps: int | None = None, teacher=None):
        if mode not in ("train", "finetune"):
            raise ValueError(mode)
        self.config = config
        self.state = state
        self.mode = mode
        self.dataset = dataset
        self.images = dataset.tensor() if dataset is not None else None
        phase = config.train if mode == "train" else config.finetune
        self.total_steps = phase.steps if total_steps is None else total_steps
        self.opt_config = config.phase_optimizer(mode)
        self.rng = torch.Generator().manual_seed(config.seed)
        self.batches = BatchStream(len(dataset), phase.batch_size, self.rng) if dataset is not None else None
        self.dropout = DropoutSchedule.from_config(config)
        self.lambdas = LambdaSchedule.from_config(config, fixed=True if mode == "finetune" else None)
        self.layer = config.decoder_feature_layer
        self.teacher = teacher if teacher is not None else build_teacher(config)
        self.perceptual_net = FrozenConvTeacher(config.channels, config.teacher.channels, config.teacher.seed)
        model = state.model
        if mode == "finetune":
            for p in model.encoder_parameters():
                p.requires_grad_(False)
            params = model.decoder_parameters()
        else:
            params = list(model.parameters())
        self.optimizer = make_optimizer(list(params) + list(state.align_head.parameters()), self.opt_config)
        self.local_step = 0

    def _forward(self, images, k, ids=None):
        model = self.state.model
        c = self.config
        quantizer = model.quantizer
        if self.mode == "finetune":
            with torch.no_grad():
                latents = quantizer.project(model.encode_images(images, padded=True))
                embeds = quantizer.lookup(quantizer.codes_for(latents))
        else:
            latents = quantizer.project(model.encode_images(images, padded=True))
            embeds = quantizer.quantize(latents).embeddings
        vq = vq_loss(latents, embeds, c.commitment_beta)
        mixed = straight_through(latents, embeds)
        inp = model.build_decoder_input(mixed, k)
        x_hat, feats = model.decode_with_features(inp, self.layer)
        pixel = pixel_recon_loss(images, x_hat)
        perceptual = perceptual_proxy(images, x_hat, self.perceptual_net)
        with torch.no_grad():
            target = self.teacher(images, ids)
        reg = alignment_loss(self.state.align_head(feats), target)
        return pixel, perceptual, vq, reg

    def step(self, images, k: int | None = None, ids=None, lam: float | None = None,
             include_alignment: bool = True) -> LossBreakdown:
        """One optimizer update on ``images``; ``k`` is sampled from the grid when not given."""
        c = self.config
        if k is None:
            k = sample_retained_length(self.rng, self.dropout)
        if lam is None:
            lam = self.lambdas(k)
        self.state.model.train(True)
        pixel, perceptual, vq, reg = self._forward(images, k, ids)
        l_rec = pixel + c.perceptual_weight * perceptual + vq
        total = l_rec + lam * reg if include_alignment else l_rec
        for name, v in (("pixel", pixel), ("perceptual", perceptual), ("vq", vq), ("alignment", reg)):
            if not torch.isfinite(v):
                raise NumericError(f"non-finite {name} loss at step {self.state.step}")
        lr = learning_rate_at(self.local_step, self.total_steps, self.opt_config)
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()
        self.state.step += 1
        self.local_step += 1
        l_rec_v, reg_v = float(l_rec.detach()), float(reg.detach())
        return LossBreakdown(self.state.step, k, lam, l_rec_v, reg_v, l_rec_v + lam * reg_v,
                             float(pixel.detach()), float(perceptual.detach()), float(vq.detach()))

    def train_step(self) -> LossBreakdown:
        idx = self.batches.next()
        return self.step(self.images[idx], ids=[int(i) for i in idx])

    def run(self, steps: int | None = None, log_file=None, progress=None) -> list[LossBreakdown]:
        steps = self.total_steps if steps is None else steps
        out = []
        for _ in range(steps):
            b = self.train_step()
            out.append(b)
            if log_file is not None:
                log_file.write(b.log_line() + "\n")
            if progress is not None:
                progress(b)
        return out


def tokenizer_train_step(batch, trainer: TokenizerTrainer) -> LossBreakdown:
    return trainer.step(batch)


def finetune_decoder_step(batch, trainer: TokenizerTrainer) -> LossBreakdown:
    if trainer.mode != "finetune":
        raise ValueError("trainer was not built in finetune mode")
    return trainer.step(batch)


@torch.no_grad()
def reconstruct(model: FlexTokenizer, images: torch.Tensor, k: int, batch_size: int = 256) -> torch.Tensor:
    model.eval()
    outs = []
    for i in range(0, len(images), batch_size):
        x = images[i:i + batch_size]
        emb = model.quantizer.lookup(model.tokenize(x))
        outs.append(model.decode(model.build_decoder_input(emb, k)))
    return torch.cat(outs)


@torch.no_grad()
def alignment_at(state: TokenizerState, teacher, images: torch.Tensor, k: int, layer: int,
                 ids=None) -> float:
    model = state.model
    model.eval()
    emb = model.quantizer.lookup(model.tokenize(images))
    feats = model.decoder_features(model.build_decoder_input(emb, k), layer)
    return float(alignment_loss(state.align_head(feats), teacher(images, ids)))


def export_codes(model: FlexTokenizer, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """First N codes per image; the padded tail is discarded."""
    model.eval()
    return torch.cat([model.tokenize(images[i:i + batch_size])[:, :model.num_tokens]
                      for i in range(0, len(images), batch_size)])


__all__ = [
    "DropoutSchedule", "LambdaSchedule", "LossBreakdown", "TokenizerState", "TokenizerTrainer",
    "alignment_at", "export_codes", "finetune_decoder_step", "lambda_schedule", "learning_rate_at",
    "new_tokenizer_state", "perceptual_proxy", "pixel_recon_loss", "reconstruct",
    "sample_retained_length", "tokenizer_train_step", "truncate",
]
