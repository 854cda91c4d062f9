"""Configuration, persistence and the canned experiment pipelines.

Subcommands:
  gen-data     write train/val task files (public + private)
  pretrain     build the warm-start checkpoint for the configured model size
  measure-gap  student/self-teacher gap of a checkpoint for one context
  train        one distillation run: gap, 50 steps, improvement, CSV row
  screen       measure-gap + train for every context kind x seed
  sweep-sizes  fixed peer_solution_feedback context across model sizes x seeds
  fit-law      fit the linear rule to the collected CSV, write report
  predict      evaluate a fitted rule at a given gap
  eval         mean@4 of a checkpoint on the validation tasks

Configs are flat key:value JSON documents; unknown keys are rejected and the
fully resolved config (plus its hash) is embedded in every artifact this
package writes, so any two artifacts with equal hashes came from identical
configs. An output directory is guarded by a lock file while a command runs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import evalproto, lawfit, trainer
from .context import ALL_CONTEXT_KINDS, ContextKind
from .distill import DistillConfig
from .env import TaskKind, gen_dataset, load_tasks, save_tasks
from .evalproto import GapRecord, append_gap_row, measure_gap, read_gap_rows
from .model import (DESK_SIZES, DecodingParams, ModelConfig, init_params,
                    load_checkpoint, save_checkpoint)
from .seeding import derive_seed
from .trainer import TrainConfig, build_pretrain_corpus, pretrain, run_training

OUT_ROOT_ENV = "OPSDLAB_OUT_ROOT"

# Desk-scale defaults. Full-scale alternates (documented, not defaults):
# train batch 32 prompts, 8 rollouts per prompt, learning rate 1e-6,
# 2048/32768-token budgets.
DEFAULTS: dict = {
    "model.size": "s",
    "model.max_seq_len": 512,
    "env.kind": "string_transform",
    "env.n_train": 128,
    "env.n_val": 50,
    "env.data_seed": 20260808,
    "pretrain.corpus_size": 20000,
    "pretrain.context_fraction": 0.25,
    "pretrain.epochs": 3,
    "pretrain.learning_rate": 1e-3,
    "pretrain.batch_size": 32,
    "pretrain.seed": 7,
    "distill.ema_rate": 0.01,
    "distill.top_k": 20,
    "distill.learning_rate": 3e-4,
    "distill.beta1": 0.9,
    "distill.beta2": 0.999,
    "distill.weight_decay": 0.01,
    "distill.grad_clip_norm": 1.0,
    "train.steps": 50,
    "train.prompts_per_step": 8,
    "train.rollouts_per_prompt": 4,
    "train.temperature": 1.0,
    "train.top_p": 1.0,
    "train.max_new_tokens": 16,
    "train.validate_every": 10,
    "train.context": "peer_solution_feedback",
    "eval.temperature": 0.6,
    "eval.top_p": 0.95,
    "eval.n_samples": 4,
    "eval.max_new_tokens": 16,
    "sweep.sizes": ["xs", "s", "m", "l"],
    "seeds": [1, 2, 3],
}


class ConfigError(ValueError):
    pass


class CliError(RuntimeError):
    pass


def resolve_config(overrides: dict | None = None) -> dict:
    cfg = dict(DEFAULTS)
    for key, val in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = val
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def provenance(cfg: dict) -> dict:
    return {"config_hash": config_hash(cfg), "config": cfg}


def model_config(cfg: dict) -> ModelConfig:
    size = cfg["model.size"]
    if size not in DESK_SIZES:
        raise ConfigError(f"unknown model.size {size!r}")
    base = DESK_SIZES[size]
    return ModelConfig(d_model=base.d_model, n_layers=base.n_layers,
                       n_heads=base.n_heads,
                       max_seq_len=cfg["model.max_seq_len"])


def distill_config(cfg: dict) -> DistillConfig:
    return DistillConfig(
        ema_rate=cfg["distill.ema_rate"], top_k=cfg["distill.top_k"],
        learning_rate=cfg["distill.learning_rate"],
        betas=(cfg["distill.beta1"], cfg["distill.beta2"]),
        weight_decay=cfg["distill.weight_decay"],
        grad_clip_norm=cfg["distill.grad_clip_norm"])


def train_decoding(cfg: dict) -> DecodingParams:
    return DecodingParams(cfg["train.temperature"], cfg["train.top_p"],
                          cfg["train.max_new_tokens"])


def val_decoding(cfg: dict) -> DecodingParams:
    return DecodingParams(cfg["eval.temperature"], cfg["eval.top_p"],
                          cfg["eval.max_new_tokens"],
                          n_samples=cfg["eval.n_samples"])


def train_config(cfg: dict, context: ContextKind, seed: int,
                 size: str | None = None) -> TrainConfig:
    cfg = dict(cfg)
    if size is not None:
        cfg["model.size"] = size
    return TrainConfig(
        model=model_config(cfg), distill=distill_config(cfg),
        context_kind=ContextKind(context), seed=seed,
        steps=cfg["train.steps"],
        prompts_per_step=cfg["train.prompts_per_step"],
        rollouts_per_prompt=cfg["train.rollouts_per_prompt"],
        train_dec=train_decoding(cfg), val_dec=val_decoding(cfg),
        validate_every=cfg["train.validate_every"])


class OutputLock:
    """Guards an output directory against concurrent runs."""

    def __init__(self, out_dir: str):
        self.path = os.path.join(out_dir, ".lock")

    def __enter__(self):
        os.makedirs(os.path.dirname(self.path), exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise CliError(f"output directory is locked: {self.path}")
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        try:
            os.remove(self.path)
        except FileNotFoundError:
            pass
        return False


# ---------------------------------------------------------------------------
# Pipelines (also used directly by the test suite)
# ---------------------------------------------------------------------------


def ensure_datasets(cfg: dict, data_dir: str):
    """Write task files if absent; load and return (train, val)."""
    os.makedirs(data_dir, exist_ok=True)
    train_path = os.path.join(data_dir, "train.private.jsonl")
    val_path = os.path.join(data_dir, "val.private.jsonl")
    if not (os.path.exists(train_path) and os.path.exists(val_path)):
        train, val = gen_dataset(TaskKind(cfg["env.kind"]), cfg["env.n_train"],
                                 cfg["env.n_val"], cfg["env.data_seed"])
        save_tasks(train_path, train, private=True)
        save_tasks(os.path.join(data_dir, "train.public.jsonl"), train,
                   private=False)
        save_tasks(val_path, val, private=True)
        save_tasks(os.path.join(data_dir, "val.public.jsonl"), val,
                   private=False)
        with open(os.path.join(data_dir, "gen_data.json"), "w") as f:
            json.dump(provenance(cfg), f, sort_keys=True, indent=1)
    return load_tasks(train_path), load_tasks(val_path)


def pretrain_config_hash(cfg: dict, size: str) -> str:
    """Hash of only the keys the warm-start checkpoint depends on."""
    keys = ("model.max_seq_len", "env.kind", "pretrain.corpus_size",
            "pretrain.context_fraction", "pretrain.epochs",
            "pretrain.learning_rate", "pretrain.batch_size", "pretrain.seed")
    return config_hash({k: cfg[k] for k in keys} | {"model.size": size})


def ensure_warmstart(cfg: dict, out_dir: str, size: str | None = None) -> str:
    """Pretrain (or reuse) the warm-start checkpoint; returns its path.

    An existing checkpoint is reused only if it records the same pretraining
    config hash; anything stale is rebuilt.
    """
    size = size or cfg["model.size"]
    path = os.path.join(out_dir, f"warmstart_{size}.ckpt")
    if os.path.exists(path):
        _, _, meta = load_checkpoint(path)
        if meta.get("pretrain_hash") == pretrain_config_hash(cfg, size):
            return path
    mc = model_config({**cfg, "model.size": size})
    corpus = build_pretrain_corpus(TaskKind(cfg["env.kind"]),
                                   cfg["pretrain.corpus_size"],
                                   cfg["pretrain.seed"],
                                   cfg["pretrain.context_fraction"],
                                   max_seq_len=mc.max_seq_len)
    params = init_params(mc, cfg["pretrain.seed"])
    params, losses = pretrain(params, mc, corpus, cfg["pretrain.epochs"],
                              cfg["pretrain.learning_rate"],
                              seed=cfg["pretrain.seed"],
                              batch_size=cfg["pretrain.batch_size"])
    os.makedirs(out_dir, exist_ok=True)
    save_checkpoint(path, mc, params,
                    meta={"tag": f"warmstart_{size}",
                          "final_loss": losses[-1] if losses else None,
                          "config_hash": config_hash(cfg),
                          "pretrain_hash": pretrain_config_hash(cfg, size)})
    return path


def run_one(cfg: dict, context: ContextKind, seed: int, warm_path: str,
            train_tasks, val_tasks, out_dir: str, csv_path: str,
            size: str | None = None) -> GapRecord:
    """Gap measurement, one training run, improvement, one CSV row."""
    tc = train_config(cfg, context, seed, size=size)
    mc, warm_params, _ = load_checkpoint(warm_path)
    if mc != tc.model:
        raise CliError("warm-start checkpoint does not match model config")
    record = measure_gap(warm_params, mc, context, val_tasks, tc.train_dec,
                         tc.rollouts_per_prompt, derive_seed(seed, "gap"),
                         model_label=size or "", run_seed=seed)
    run = run_training(tc, train_tasks, val_tasks, student_params=warm_params,
                       out_dir=out_dir, provenance=provenance(cfg))
    record.improvement = evalproto.improvement(
        (mc, run.initial_params), (mc, run.final_params), val_tasks,
        val_decoding(cfg), derive_seed(seed, "eval"))
    append_gap_row(csv_path, record, provenance={
        "config_hash": config_hash(cfg)})
    return record


def fit_from_csv(csv_path: str):
    records = read_gap_rows(csv_path)
    points = lawfit.points_from_records(records)
    return lawfit.fit_law(points), points


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


def _load_overrides(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a flat JSON object")
    return doc


def _out_dir(args) -> str:
    if args.out:
        return args.out
    root = os.environ.get(OUT_ROOT_ENV)
    if root:
        return os.path.join(root, args.command)
    raise CliError(f"--out required (or set {OUT_ROOT_ENV})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="opsdlab",
        description="desk-scale self-distillation experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="flat JSON config file")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="run seed")

    p = sub.add_parser("gen-data", help="write train/val task files")
    common(p)

    p = sub.add_parser("pretrain", help="build the warm-start checkpoint")
    common(p)

    p = sub.add_parser("measure-gap", help="gap of a checkpoint")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--context", default="peer_solution_feedback",
                   choices=[k.value for k in ALL_CONTEXT_KINDS])
    p.add_argument("--data-dir", default=None)

    p = sub.add_parser("train", help="one distillation run plus CSV row")
    common(p)
    p.add_argument("--ckpt", default=None, help="warm-start checkpoint")
    p.add_argument("--context", default=None,
                   choices=[k.value for k in ALL_CONTEXT_KINDS])
    p.add_argument("--data-dir", default=None)
    p.add_argument("--csv", default=None, help="law CSV to append to")

    p = sub.add_parser("screen", help="every context kind x seed")
    common(p)
    p.add_argument("--data-dir", default=None)

    p = sub.add_parser("sweep-sizes", help="model sizes x seeds, fixed context")
    common(p)
    p.add_argument("--data-dir", default=None)

    p = sub.add_parser("fit-law", help="fit the rule to a CSV")
    common(p)
    p.add_argument("--csv", required=True)

    p = sub.add_parser("predict", help="evaluate a fitted rule")
    common(p)
    p.add_argument("--gap", type=float, required=True)
    p.add_argument("--fit", required=True, help="fit report path")

    p = sub.add_parser("eval", help="mean@4 of a checkpoint")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data-dir", default=None)
    return parser


def cli(argv: list[str]) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(_load_overrides(args.config))
        return _dispatch(args, cfg)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    except (CliError, ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args, cfg: dict) -> int:
    command = args.command
    out = _out_dir(args)
    seed = args.seed if args.seed is not None else cfg["seeds"][0]

    if command == "gen-data":
        with OutputLock(out):
            train, val = ensure_datasets(cfg, out)
        print(f"wrote {len(train)} train / {len(val)} val tasks to {out}")
        return 0

    if command == "pretrain":
        with OutputLock(out):
            path = ensure_warmstart(cfg, out)
        print(f"warm-start checkpoint: {path}")
        return 0

    if command == "measure-gap":
        data_dir = args.data_dir or os.path.join(out, "data")
        with OutputLock(out):
            _, val = ensure_datasets(cfg, data_dir)
            mc, params, _ = load_checkpoint(args.ckpt)
            rec = measure_gap(params, mc, ContextKind(args.context), val,
                              train_decoding(cfg),
                              cfg["train.rollouts_per_prompt"],
                              derive_seed(seed, "gap"),
                              model_label=cfg["model.size"], run_seed=seed)
            payload = {"config_hash": config_hash(cfg), **rec.__dict__}
            with open(os.path.join(out, "gap.json"), "w") as f:
                json.dump(payload, f, sort_keys=True, indent=1)
        print(json.dumps(payload, sort_keys=True))
        return 0

    if command == "train":
        context = ContextKind(args.context or cfg["train.context"])
        data_dir = args.data_dir or os.path.join(out, "data")
        csv_path = args.csv or os.path.join(out, "law.csv")
        with OutputLock(out):
            train_tasks, val_tasks = ensure_datasets(cfg, data_dir)
            warm = args.ckpt or ensure_warmstart(cfg, out)
            run_dir = os.path.join(out, f"run_{context.value}_s{seed}")
            rec = run_one(cfg, context, seed, warm, train_tasks, val_tasks,
                          run_dir, csv_path)
        print(json.dumps({"config_hash": config_hash(cfg), **rec.__dict__},
                         sort_keys=True))
        return 0

    if command == "screen":
        data_dir = args.data_dir or os.path.join(out, "data")
        csv_path = os.path.join(out, "law.csv")
        with OutputLock(out):
            train_tasks, val_tasks = ensure_datasets(cfg, data_dir)
            warm = ensure_warmstart(cfg, out)
            for context in ALL_CONTEXT_KINDS:
                for s in cfg["seeds"]:
                    run_dir = os.path.join(out, f"run_{context.value}_s{s}")
                    rec = run_one(cfg, context, s, warm, train_tasks,
                                  val_tasks, run_dir, csv_path)
                    print(f"{context.value} seed {s}: gap "
                          f"{rec.initial_gap:+.4f} improvement "
                          f"{rec.improvement:+.4f}")
        print(f"law rows in {csv_path}")
        return 0

    if command == "sweep-sizes":
        data_dir = args.data_dir or os.path.join(out, "data")
        csv_path = os.path.join(out, "law.csv")
        context = ContextKind.PEER_SOLUTION_FEEDBACK
        with OutputLock(out):
            train_tasks, val_tasks = ensure_datasets(cfg, data_dir)
            for size in cfg["sweep.sizes"]:
                warm = ensure_warmstart(cfg, out, size=size)
                for s in cfg["seeds"]:
                    run_dir = os.path.join(out, f"run_{size}_s{s}")
                    rec = run_one(cfg, context, s, warm, train_tasks,
                                  val_tasks, run_dir, csv_path, size=size)
                    print(f"{size} seed {s}: gap {rec.initial_gap:+.4f} "
                          f"improvement {rec.improvement:+.4f}")
        print(f"law rows in {csv_path}")
        return 0

    if command == "fit-law":
        with OutputLock(out):
            fit, points = fit_from_csv(args.csv)
            prov = {"config_hash": config_hash(cfg), "source": args.csv}
            lawfit.write_fit_report(os.path.join(out, "fit_report.txt"), fit,
                                    prov)
            lawfit.write_plot_data(os.path.join(out, "plot_data.csv"), points,
                                   fit, prov)
        print(f"slope {fit.slope:.4f} intercept {fit.intercept:.4f} "
              f"R^2 {fit.r_squared:.4f} spearman {fit.spearman_rho:.3f}")
        return 0

    if command == "predict":
        fit = lawfit.read_fit_report(args.fit)
        print(repr(lawfit.predict(fit, args.gap)))
        return 0

    if command == "eval":
        data_dir = args.data_dir or os.path.join(out, "data")
        with OutputLock(out):
            _, val = ensure_datasets(cfg, data_dir)
            mc, params, _ = load_checkpoint(args.ckpt)
            dec = val_decoding(cfg)
            acc = evalproto.mean_at_n(params, mc, val, dec, dec.n_samples,
                                      derive_seed(seed, "eval"))
        print(json.dumps({"config_hash": config_hash(cfg),
                          "mean_at_4": acc}, sort_keys=True))
        return 0

    raise CliError(f"unknown command {command!r}")  # pragma: no cover


def main() -> None:
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
