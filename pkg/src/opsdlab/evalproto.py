"""Measurement protocol: mean@n pass rates, the student/self-teacher gap and
the start-to-end improvement.

Gap measurement reuses the training-time context construction: fresh student
rollouts provide the feedback and peer solutions for the privileged prompt,
and one teacher completion is sampled per rollout. Teacher completions reuse
the rollout's derived seed, so with the control context (identical prompts,
identical weights) the teacher draw is bit-identical to the student draw and
the measured gap is exactly zero; richer contexts then benefit from the same
common random numbers. Improvement between two checkpoints is paired the same
way: both evaluations run the same tasks with the same derived seeds.

Gap uses train-time decoding; improvement uses validation decoding. Both are
asserted, not assumed.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .context import ContextInputs, ContextKind, build_teacher_prompt
from .env import TaskInstance, Verdict, verify
from .model import DecodingParams, ModelConfig, decode_tokens, encode_prompt, sample_batch
from .numcore import ContractError
from .seeding import derive_seed

VALIDATION_DECODING = {"temperature": 0.6, "top_p": 0.95, "n_samples": 4}


@dataclass(frozen=True)
class Rollout:
    """One sampled response with its verdict (feedback lives on the verdict)."""
    response_tokens: tuple
    response_text: str
    verdict: Verdict


@dataclass
class GapRecord:
    context_kind: str
    model: str
    seed: int
    student_acc: float
    teacher_acc: float
    initial_gap: float
    improvement: Optional[float] = None


def sample_rollouts(params, cfg: ModelConfig, tasks: list[TaskInstance],
                    dec: DecodingParams, n: int, rng_seed: int,
                    label: str = "") -> list[list[Rollout]]:
    """n verified rollouts per task; seed of sample i for task t is
    derive_seed(rng_seed, label, t.task_id, i)."""
    prompts, seeds = [], []
    for t in tasks:
        for i in range(n):
            prompts.append(encode_prompt(t.prompt_text))
            seeds.append(derive_seed(rng_seed, label, t.task_id, i))
    outs = sample_batch(params, cfg, prompts, dec, seeds)
    rolls: list[list[Rollout]] = []
    pos = 0
    for t in tasks:
        row = []
        for _ in range(n):
            toks = outs[pos]
            pos += 1
            text = decode_tokens(toks).strip()
            row.append(Rollout(tuple(toks), text, verify(t, text)))
        rolls.append(row)
    return rolls


def pick_peer(rollouts: list[Rollout], i: int) -> Optional[str]:
    """First passing rollout among the others, by lowest sample index."""
    for j, r in enumerate(rollouts):
        if j != i and r.verdict.passed:
            return r.response_text
    return None


def rollout_context_inputs(task: TaskInstance, rollouts: list[Rollout],
                           i: int) -> ContextInputs:
    r = rollouts[i]
    return ContextInputs(prompt_text=task.prompt_text,
                         own_response=r.response_text,
                         own_verdict=r.verdict,
                         peer_correct_response=pick_peer(rollouts, i))


def mean_at_n(params, cfg: ModelConfig, tasks: list[TaskInstance],
              dec: DecodingParams, n: int, rng_seed: int) -> float:
    """Grand mean of pass indicators over tasks x n samples."""
    if n < 1:
        raise ContractError("n must be >= 1")
    rolls = sample_rollouts(params, cfg, tasks, dec, n, rng_seed)
    return float(np.mean([[r.verdict.passed for r in row] for row in rolls]))


def teacher_pass_matrix(student_params, teacher_params, cfg: ModelConfig,
                        context_kind: ContextKind, tasks: list[TaskInstance],
                        rollouts: list[list[Rollout]], teacher_dec: DecodingParams,
                        rng_seed: int, label: str = "") -> np.ndarray:
    """One teacher completion per rollout, under the privileged prompt.

    Completion (t, i) reuses the rollout's derived seed so that the control
    context is change-free and richer contexts are variance-paired.
    """
    budget = cfg.max_seq_len - teacher_dec.max_new_tokens
    prompts, seeds = [], []
    for t, row in zip(tasks, rollouts):
        for i in range(len(row)):
            text = build_teacher_prompt(context_kind,
                                        rollout_context_inputs(t, row, i),
                                        max_tokens=budget)
            prompts.append(encode_prompt(text))
            seeds.append(derive_seed(rng_seed, label, t.task_id, i))
    outs = sample_batch(teacher_params, cfg, prompts, teacher_dec, seeds)
    n = len(rollouts[0])
    passes = np.zeros((len(tasks), n), dtype=bool)
    pos = 0
    for ti, t in enumerate(tasks):
        for i in range(n):
            text = decode_tokens(outs[pos]).strip()
            pos += 1
            passes[ti, i] = verify(t, text).passed
    return passes


def measure_gap(params, cfg: ModelConfig, context_kind: ContextKind,
                val_tasks: list[TaskInstance], train_dec: DecodingParams,
                n: int, rng_seed: int, model_label: str = "",
                run_seed: Optional[int] = None) -> GapRecord:
    """Student accuracy vs self-teacher accuracy before training.

    The same weights serve as student and teacher (the EMA copy equals the
    student before any step). Student accuracy is mean@n over plain prompts;
    those very rollouts supply the context inputs for the teacher side.
    """
    rolls = sample_rollouts(params, cfg, val_tasks, train_dec, n, rng_seed)
    student = float(np.mean([[r.verdict.passed for r in row] for row in rolls]))
    passes = teacher_pass_matrix(params, params, cfg, context_kind, val_tasks,
                                 rolls, train_dec, rng_seed)
    teacher = float(passes.mean())
    return GapRecord(context_kind=ContextKind(context_kind).value,
                     model=model_label,
                     seed=run_seed if run_seed is not None else rng_seed,
                     student_acc=student, teacher_acc=teacher,
                     initial_gap=teacher - student)


def improvement(initial_ckpt: tuple[ModelConfig, dict],
                final_ckpt: tuple[ModelConfig, dict],
                val_tasks: list[TaskInstance], val_dec: DecodingParams,
                rng_seed: int) -> float:
    """mean@n(final) - mean@n(initial) with paired tasks and paired seeds."""
    cfg_i, params_i = initial_ckpt
    cfg_f, params_f = final_ckpt
    if cfg_i != cfg_f:
        raise ContractError("checkpoints have different model configs")
    if (val_dec.temperature, val_dec.top_p, val_dec.n_samples) != (
            VALIDATION_DECODING["temperature"], VALIDATION_DECODING["top_p"],
            VALIDATION_DECODING["n_samples"]):
        raise ContractError("improvement requires validation decoding "
                            "(temperature 0.6, top_p 0.95, n=4)")
    n = val_dec.n_samples
    before = mean_at_n(params_i, cfg_i, val_tasks, val_dec, n, rng_seed)
    after = mean_at_n(params_f, cfg_f, val_tasks, val_dec, n, rng_seed)
    return after - before


def binomial_se(p: float, trials: int) -> float:
    return float(np.sqrt(max(p * (1.0 - p), 1e-12) / trials))


# ---------------------------------------------------------------------------
# Law CSV: provenance comments, then header context,model,seed,initial_gap,
# improvement; one row per (context or model size, seed).
# ---------------------------------------------------------------------------

CSV_HEADER = ["context", "model", "seed", "initial_gap", "improvement"]


def append_gap_row(path, record: GapRecord, provenance: dict) -> None:
    import os
    fresh = not os.path.exists(path)
    with open(path, "a", encoding="utf-8", newline="") as f:
        if fresh:
            for key, val in sorted(provenance.items()):
                f.write(f"# {key}={val}\n")
            f.write(",".join(CSV_HEADER) + "\n")
        writer = csv.writer(f)
        writer.writerow([record.context_kind, record.model, record.seed,
                         repr(record.initial_gap),
                         "" if record.improvement is None
                         else repr(record.improvement)])


def read_gap_rows(path) -> list[GapRecord]:
    records = []
    with open(path, encoding="utf-8") as f:
        rows = [line for line in f if line.strip() and not line.startswith("#")]
    reader = csv.DictReader(rows)
    for row in reader:
        records.append(GapRecord(
            context_kind=row["context"], model=row["model"],
            seed=int(row["seed"]), student_acc=float("nan"),
            teacher_acc=float("nan"), initial_gap=float(row["initial_gap"]),
            improvement=float(row["improvement"]) if row["improvement"] else None))
    return records
