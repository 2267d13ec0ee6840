"""Command line entry point: ``padtok <command> [--config ...]``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import analysis, imaging
from .ar import CfgSchedule, mean_loss, progressive_decode, sample_sequence
from .checkpoint import save_checkpoint
from .config import ExperimentConfig, load_config, save_config
from .data import Dataset, generate_synthetic_dataset, load_dataset, load_image_folder
from .errors import PadtokError
from .pipeline import (ar_checkpoint, export_tokens, finetune_decoder, load_ar, load_tokenizer,
                       tokenizer_checkpoint, train_ar, train_tokenizer)
from .teacher import FrozenConvTeacher
from .tokenfile import read_token_file
from .training import DropoutSchedule, reconstruct

log = logging.getLogger("padtok")


def _config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig().validate()
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    return config


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(args, config) -> Dataset:
    path = getattr(args, "data", None)
    if path:
        p = Path(path)
        return load_image_folder(p, config.image_size, config.channels) if p.is_dir() else Dataset.load(p)
    return load_dataset(config)


def _splits(args, config):
    ds = _dataset(args, config)
    holdout = min(config.data.holdout, len(ds) - 1)
    return ds.split(holdout)


def cmd_make_data(args):
    config = _config(args)
    d = config.data
    ds = generate_synthetic_dataset(args.count or d.count, args.class_count or d.class_count,
                                    d.seed if args.data_seed is None else args.data_seed,
                                    config.image_size, config.channels)
    out = _out_dir(args)
    ds.save(out / "dataset.npz")
    preview = [ds.tensor(np.flatnonzero(ds.labels == c)[:8]) for c in range(ds.class_count)]
    imaging.save_grid(out / "preview.png", preview, scale=2)
    print(json.dumps({"path": str(out / "dataset.npz"), "count": len(ds), "classes": ds.class_count}))


def cmd_train_tokenizer(args):
    config = _config(args)
    out = _out_dir(args)
    train, _ = _splits(args, config)
    save_config(config, out / "config.json")

    def progress(b):
        if b.step % args.log_every == 0:
            log.info("step %d k=%d lambda=%.3f l_rec=%.4f l_reg=%.4f", b.step, b.k, b.lam, b.l_rec, b.l_reg)

    from .training import TokenizerTrainer, new_tokenizer_state

    state = new_tokenizer_state(config)
    trainer = TokenizerTrainer(config, state, train, "train", total_steps=args.steps)
    with open(out / "metrics.jsonl", "w") as f:
        trainer.run(log_file=f, progress=progress)
    ckpt = out / "tokenizer.ckpt"
    save_checkpoint(tokenizer_checkpoint(state, config, trainer.rng), ckpt)
    if args.export_tokens:
        export_tokens(state, train, args.export_tokens)
    print(json.dumps({"checkpoint": str(ckpt), "steps": state.step}))


def cmd_finetune_decoder(args):
    state, config = load_tokenizer(args.checkpoint)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    out = _out_dir(args)
    train, _ = _splits(args, config)
    _, _, trainer = finetune_decoder(config, state, train, args.steps, out / "finetune_metrics.jsonl")
    ckpt = out / "tokenizer_finetuned.ckpt"
    save_checkpoint(tokenizer_checkpoint(state, config, trainer.rng, component="decoder-only"), ckpt)
    if args.export_tokens:
        export_tokens(state, train, args.export_tokens)
    print(json.dumps({"checkpoint": str(ckpt), "steps": state.step}))


def cmd_train_ar(args):
    config = _config(args)
    tokens = read_token_file(args.tokens)
    class_count = args.class_count or int(tokens.labels.max()) + 1
    out = _out_dir(args)
    model, losses, trainer = train_ar(config, tokens, class_count, args.steps, out / "ar_metrics.jsonl")
    save_checkpoint(ar_checkpoint(model, config, trainer.rng, trainer.step_count), out / "ar.ckpt")
    print(json.dumps({"checkpoint": str(out / "ar.ckpt"), "final_ce": mean_loss(model, tokens)}))


def cmd_sample(args):
    model, config = load_ar(args.checkpoint)
    tok_state, tok_config = load_tokenizer(args.tokenizer)
    out = _out_dir(args)
    rng = torch.Generator().manual_seed(config.seed if args.seed is None else args.seed)
    schedule = CfgSchedule(config.cfg.scale if args.cfg_scale is None else args.cfg_scale,
                           config.cfg.free_fraction)
    temperature = config.ar.temperature if args.temperature is None else args.temperature
    codes = sample_sequence(model, args.label, args.length, schedule, rng, temperature,
                            config.ar.top_k, count=args.count)
    grid = DropoutSchedule(tok_config.k_min, tok_config.num_tokens_n, tok_config.dropout_step).grid
    lengths = [int(x) for x in args.progressive.split(",")] if args.progressive else [args.length]
    images = progressive_decode(codes, tok_state.model, lengths, grid)
    rows = [[images[k][i] for k in lengths] for i in range(args.count)]
    imaging.save_grid(out / f"samples_label{args.label}.png", rows, scale=4)
    np.save(out / f"codes_label{args.label}.npy", codes.numpy())
    print(json.dumps({"png": str(out / f"samples_label{args.label}.png"), "codes": codes.tolist()}))


def cmd_eval_recon(args):
    state, config = load_tokenizer(args.checkpoint)
    _, test = _splits(args, config)
    x = test.tensor()
    teacher = FrozenConvTeacher(config.channels, config.teacher.channels, config.teacher.seed)
    real = analysis.GaussianStats.from_features(analysis.teacher_embedding(teacher, x)) \
        if len(x) > config.teacher.channels else None
    lengths = [int(v) for v in args.lengths.split(",")] if args.lengths else \
        DropoutSchedule.from_config(config).grid
    results = []
    for k in lengths:
        x_hat = reconstruct(state.model, x, k)
        row = {"k": k, **analysis.recon_metrics(x, x_hat)}
        if real is not None:
            fake = analysis.GaussianStats.from_features(analysis.teacher_embedding(teacher, x_hat))
            row["feature_fid"] = analysis.feature_fid(real, fake)
        results.append(row)
        print(json.dumps(row))
    if args.out_dir:
        (_out_dir(args) / "recon.json").write_text(json.dumps(results, indent=2))


def cmd_analyze_contribution(args):
    state, config = load_tokenizer(args.checkpoint)
    _, test = _splits(args, config)
    rng = torch.Generator().manual_seed(config.seed if args.seed is None else args.seed)
    x = test.tensor()[: args.limit] if args.limit else test.tensor()
    profile = analysis.token_contribution(state.model, x, rng, trials=args.trials)
    imaging.save_heatmap(args.out, profile.weights)
    if args.csv:
        profile.to_csv(args.csv)
    print(json.dumps({"entropy": profile.entropy, "max_entropy": float(np.log(len(profile.weights))),
                      "head_mass": profile.head_mass(max(1, len(profile.weights) // 4))}))


def cmd_visualize_pca(args):
    state, config = load_tokenizer(args.checkpoint)
    _, test = _splits(args, config)
    cls = test.of_class(args.class_id)
    x = cls.tensor()[: args.count]
    lengths = [int(v) for v in args.lengths.split(",")] if args.lengths else [config.k_min, config.num_tokens_n]
    maps = analysis.pca_visualize(state.model, x, lengths, layer=args.layer)
    out = _out_dir(args)
    side = config.image_size
    rows = []
    for i in range(len(x)):
        row = [x[i]]
        for k in lengths:
            m = torch.from_numpy(maps[k][i]).permute(2, 0, 1)[None]
            row.append(torch.nn.functional.interpolate(m, size=(side, side), mode="nearest")[0])
        rows.append(row)
    imaging.save_grid(out / f"pca_class{args.class_id}.png", rows, scale=4)
    print(json.dumps({"png": str(out / f"pca_class{args.class_id}.png"), "lengths": lengths}))


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="JSON experiment config (defaults to the desk config)")
    shared.add_argument("--seed", type=int, default=None)
    shared.add_argument("--out-dir", default="runs/default")
    shared.add_argument("--checkpoint")
    shared.add_argument("--data", help="dataset .npz or image folder (overrides config.data)")

    p = argparse.ArgumentParser(prog="padtok", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-data", parents=[shared])
    s.add_argument("--count", type=int)
    s.add_argument("--class-count", type=int)
    s.add_argument("--data-seed", type=int)
    s.set_defaults(func=cmd_make_data)

    s = sub.add_parser("train-tokenizer", parents=[shared])
    s.add_argument("--steps", type=int)
    s.add_argument("--export-tokens", help="write first-N codes of the training split here")
    s.add_argument("--log-every", type=int, default=50)
    s.set_defaults(func=cmd_train_tokenizer)

    s = sub.add_parser("finetune-decoder", parents=[shared])
    s.add_argument("--steps", type=int)
    s.add_argument("--export-tokens")
    s.set_defaults(func=cmd_finetune_decoder)

    s = sub.add_parser("train-ar", parents=[shared])
    s.add_argument("--tokens", required=True)
    s.add_argument("--class-count", type=int)
    s.add_argument("--steps", type=int)
    s.set_defaults(func=cmd_train_ar)

    s = sub.add_parser("sample", parents=[shared])
    s.add_argument("--tokenizer", required=True, help="tokenizer checkpoint used for decoding")
    s.add_argument("--label", type=int, required=True)
    s.add_argument("--length", type=int, required=True)
    s.add_argument("--cfg-scale", type=float)
    s.add_argument("--count", type=int, default=4)
    s.add_argument("--temperature", type=float)
    s.add_argument("--progressive", help="comma-separated prefix lengths to decode")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("eval-recon", parents=[shared])
    s.add_argument("--lengths")
    s.set_defaults(func=cmd_eval_recon, out_dir=None)

    s = sub.add_parser("analyze-contribution", parents=[shared])
    s.add_argument("--out", default="heatmap.png")
    s.add_argument("--csv")
    s.add_argument("--trials", type=int, default=1)
    s.add_argument("--limit", type=int)
    s.set_defaults(func=cmd_analyze_contribution)

    s = sub.add_parser("visualize-pca", parents=[shared])
    s.add_argument("--class-id", type=int, default=0)
    s.add_argument("--lengths")
    s.add_argument("--layer", type=int, default=1)
    s.add_argument("--count", type=int, default=8)
    s.set_defaults(func=cmd_visualize_pca)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    needs_ckpt = {"finetune-decoder", "sample", "eval-recon", "analyze-contribution", "visualize-pca"}
    if args.command in needs_ckpt and not args.checkpoint:
        print(f"padtok {args.command}: --checkpoint is required", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except PadtokError as exc:
        print(f"padtok {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
