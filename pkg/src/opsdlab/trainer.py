"""Training orchestration: warm-start pretraining and the self-distillation
loop (sample rollouts, verify, build privileged prompts, distill, update,
EMA), with line-oriented run records.

A from-scratch byte model has no competence, so every run starts from a
warm-start checkpoint produced by `pretrain`: plain next-token loss over
solved transcripts, a quarter of which are formatted as privileged prompts
(feedback, peer solutions, hints, preamble) followed by the correct answer.
Without that slice the model could not exploit any privileged context
in-context and every teacher would collapse onto the student.

Each gradient step consumes exactly prompts_per_step x rollouts_per_prompt
rollouts, processed as mini-batches of one with gradient accumulation in
fixed rollout order, so a step is bit-reproducible for a given seed.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import distill, evalproto
from .context import ContextInputs, ContextKind, render_teacher_prompt
from .distill import DistillConfig, NonFiniteGradientError, OptimState
from .env import TaskInstance, TaskKind, Verdict, _gen_arithmetic, _gen_string, verify
from .model import (EOS, PAD, DecodingParams, ModelConfig, copy_params,
                    encode_prompt, encode_text, init_params, logits_on_tape,
                    register_params, save_checkpoint,
                    sequence_logprob_rows_on_tape)
from .numcore import ContractError, Tape, backward
from .seeding import derive_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig
    distill: DistillConfig
    context_kind: ContextKind
    seed: int
    steps: int = 50
    prompts_per_step: int = 8      # 32 at full scale
    rollouts_per_prompt: int = 4   # 8 at full scale
    train_dec: DecodingParams = field(
        default_factory=lambda: DecodingParams(1.0, 1.0, 16))
    val_dec: DecodingParams = field(
        default_factory=lambda: DecodingParams(0.6, 0.95, 16, n_samples=4))
    validate_every: int = 10

    def __post_init__(self):
        if self.steps < 0 or self.prompts_per_step < 1:
            raise ContractError("steps >= 0 and prompts_per_step >= 1 required")
        needs_peers = self.context_kind in (ContextKind.PEER_HINTS,
                                            ContextKind.PEER_SOLUTION_FEEDBACK)
        if self.rollouts_per_prompt < (2 if needs_peers else 1):
            raise ContractError("peer contexts need rollouts_per_prompt >= 2")


@dataclass
class StepMetrics:
    step: int
    mean_loss: float
    rollout_pass_rate: float
    teacher_pass_rate: float
    tokens_processed: int
    skipped: bool
    fallbacks: int


@dataclass
class TrainState:
    cfg: TrainConfig
    student: dict[str, np.ndarray]
    teacher: dict[str, np.ndarray]
    optim: OptimState
    step: int = 0


@dataclass
class RunRecord:
    steps: list[StepMetrics]
    validations: list[dict]
    initial_params: dict[str, np.ndarray]
    final_params: dict[str, np.ndarray]
    final_teacher: dict[str, np.ndarray]


def rollout_loss_grads(state: TrainState, task: TaskInstance,
                       rollout: evalproto.Rollout, teacher_prompt: str):
    """Loss value and student gradients for one rollout (mini-batch of one).

    The teacher scores the student's own response tokens, conditioned on the
    privileged prompt; its branch is frozen, so its parameters receive exact
    zeros, which we rely on rather than recompute.
    """
    cfg = state.cfg
    response = list(rollout.response_tokens)
    student_seq = encode_prompt(task.prompt_text) + response
    teacher_seq = encode_prompt(teacher_prompt) + response
    s_prefix = len(student_seq) - len(response)
    t_prefix = len(teacher_seq) - len(response)
    assert student_seq[s_prefix:] == teacher_seq[t_prefix:]

    tape = Tape()
    s_nodes = register_params(tape, state.student, prefix="student.")
    t_nodes = register_params(tape, state.teacher, prefix="teacher.")
    s_rows = sequence_logprob_rows_on_tape(tape, s_nodes, cfg.model,
                                           student_seq, s_prefix)
    t_rows = sequence_logprob_rows_on_tape(tape, t_nodes, cfg.model,
                                           teacher_seq, t_prefix)
    loss_node = distill.opsd_loss(tape, s_rows, tape.stop_gradient(t_rows),
                                  len(response), cfg.distill.top_k)
    grads = backward(tape, loss_node)
    student_grads = {k[len("student."):]: g for k, g in grads.items()
                     if k.startswith("student.")}
    tokens = len(student_seq) + len(teacher_seq)
    return float(tape.value(loss_node)), student_grads, tokens


def train_step(state: TrainState, batch: list[TaskInstance]) -> StepMetrics:
    """One gradient step over prompts_per_step x rollouts_per_prompt rollouts."""
    cfg = state.cfg
    n = cfg.rollouts_per_prompt
    budget = cfg.model.max_seq_len - cfg.train_dec.max_new_tokens
    rollout_seed = derive_seed(cfg.seed, "rollout", state.step)
    rolls = evalproto.sample_rollouts(state.student, cfg.model, batch,
                                      cfg.train_dec, n, rollout_seed)

    teacher_prompts: list[list[str]] = []
    fallbacks = 0
    for task, row in zip(batch, rolls):
        prompts_for_task = []
        for i in range(n):
            rend = render_teacher_prompt(
                cfg.context_kind, evalproto.rollout_context_inputs(task, row, i),
                max_tokens=budget)
            fallbacks += int(rend.fallback)
            prompts_for_task.append(rend.text)
        teacher_prompts.append(prompts_for_task)

    losses, tokens_processed = [], 0
    grad_sum: dict[str, np.ndarray] = {}
    for task, row, tprompts in zip(batch, rolls, teacher_prompts):
        for i in range(n):
            loss, grads, tokens = rollout_loss_grads(state, task, row[i],
                                                     tprompts[i])
            losses.append(loss)
            tokens_processed += tokens
            for key, g in grads.items():
                if key in grad_sum:
                    grad_sum[key] += g
                else:
                    grad_sum[key] = g.copy()
    count = len(losses)
    mean_grads = {k: g / count for k, g in grad_sum.items()}
    mean_loss = float(np.mean(losses))

    skipped = False
    try:
        new_student, new_optim = distill.clip_then_adamw(
            state.student, mean_grads, state.optim, cfg.distill)
        state.student, state.optim = new_student, new_optim
        state.teacher = distill.ema_update(state.teacher, state.student,
                                           cfg.distill.ema_rate)
    except NonFiniteGradientError as exc:
        skipped = True
        log.warning("step %d skipped: %s", state.step, exc)

    # one teacher completion per rollout, for the self-teacher curve
    passes = evalproto.teacher_pass_matrix(
        state.student, state.teacher, cfg.model, cfg.context_kind, batch,
        rolls, cfg.train_dec, derive_seed(cfg.seed, "teacher", state.step),
        label="step")

    metrics = StepMetrics(
        step=state.step,
        mean_loss=mean_loss,
        rollout_pass_rate=float(np.mean([[r.verdict.passed for r in row]
                                         for row in rolls])),
        teacher_pass_rate=float(passes.mean()),
        tokens_processed=tokens_processed,
        skipped=skipped,
        fallbacks=fallbacks,
    )
    state.step += 1
    return metrics


def validation_point(state: TrainState, val_tasks: list[TaskInstance],
                     eval_seed: int) -> dict:
    """Student and self-teacher mean@4 on the validation tasks.

    Both sides decode with validation parameters so the two curves are
    comparable; the context inputs come from fresh student rollouts at
    train-time decoding, mirroring the training distribution. The evaluation
    seed is fixed per run, so points along the run are paired.
    """
    cfg = state.cfg
    nv = cfg.val_dec.n_samples
    student_acc = evalproto.mean_at_n(state.student, cfg.model, val_tasks,
                                      cfg.val_dec, nv, eval_seed)
    ctx_rolls = evalproto.sample_rollouts(
        state.student, cfg.model, val_tasks, cfg.train_dec, nv,
        derive_seed(eval_seed, "ctx"))
    passes = evalproto.teacher_pass_matrix(
        state.student, state.teacher, cfg.model, cfg.context_kind, val_tasks,
        ctx_rolls, cfg.val_dec, derive_seed(eval_seed, "teacher"))
    return {"step": state.step,
            "student_mean_at_4": student_acc,
            "teacher_mean_at_4": float(passes.mean())}


def _task_stream(tasks: list[TaskInstance], seed: int):
    epoch = 0
    while True:
        rng = np.random.default_rng(derive_seed(seed, "order", epoch))
        for idx in rng.permutation(len(tasks)):
            yield tasks[int(idx)]
        epoch += 1


def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def run_training(cfg: TrainConfig, train_tasks: list[TaskInstance],
                 val_tasks: list[TaskInstance],
                 student_params: Optional[dict] = None,
                 out_dir: Optional[str] = None,
                 provenance: Optional[dict] = None) -> RunRecord:
    """Warm-started distillation run: cfg.steps steps with periodic validation.

    student_params is normally a warm-start checkpoint; the EMA teacher starts
    as an exact copy. The run record is written line by line (one JSON object
    per step or validation point), so a partial file is valid up to the last
    completed step. Initial and final checkpoints are saved when out_dir is
    given.
    """
    state = init_train_state(cfg, student=student_params)
    return resume_training(state, train_tasks, val_tasks, out_dir=out_dir,
                           provenance=provenance)


def init_train_state(cfg: TrainConfig,
                     student: Optional[dict] = None) -> TrainState:
    if student is None:
        student = init_params(cfg.model, cfg.seed)
    return TrainState(cfg=cfg, student=copy_params(student),
                      teacher=copy_params(student),
                      optim=OptimState.zeros_like(student))


def resume_training(state: TrainState, train_tasks, val_tasks,
                    out_dir: Optional[str] = None,
                    provenance: Optional[dict] = None) -> RunRecord:
    cfg = state.cfg
    initial = copy_params(state.student)
    eval_seed = derive_seed(cfg.seed, "eval")
    stream = _task_stream(train_tasks, cfg.seed)

    record_file = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(os.path.join(out_dir, "initial.ckpt"), cfg.model,
                        initial, meta={"tag": "initial",
                                       **(provenance or {})})
        record_file = open(os.path.join(out_dir, "run_record.jsonl"), "w",
                           encoding="utf-8")
        header = {"type": "header", "provenance": provenance or {}}
        record_file.write(json.dumps(header, sort_keys=True) + "\n")

    def emit(obj: dict) -> None:
        if record_file is not None:
            record_file.write(json.dumps(
                {k: _json_safe(v) for k, v in obj.items()},
                sort_keys=True) + "\n")
            record_file.flush()

    steps: list[StepMetrics] = []
    validations: list[dict] = []

    def validate() -> None:
        point = validation_point(state, val_tasks, eval_seed)
        validations.append(point)
        emit({"type": "validation", **point})

    try:
        validate()
        for _ in range(cfg.steps):
            batch = [next(stream) for _ in range(cfg.prompts_per_step)]
            metrics = train_step(state, batch)
            steps.append(metrics)
            emit({"type": "step", **asdict(metrics)})
            due = state.step % cfg.validate_every == 0
            if due and state.step != cfg.steps:
                validate()
        if cfg.steps > 0:
            validate()
        if out_dir is not None:
            save_checkpoint(os.path.join(out_dir, "final.ckpt"), cfg.model,
                            state.student, meta={"tag": "final",
                                                 **(provenance or {})})
            save_checkpoint(os.path.join(out_dir, "final_teacher.ckpt"),
                            cfg.model, state.teacher,
                            meta={"tag": "final_teacher", **(provenance or {})})
    finally:
        if record_file is not None:
            record_file.close()

    return RunRecord(steps=steps, validations=validations,
                     initial_params=initial,
                     final_params=copy_params(state.student),
                     final_teacher=copy_params(state.teacher))


# ---------------------------------------------------------------------------
# Warm-start pretraining
# ---------------------------------------------------------------------------

# corpus shares: context_fraction covers the feedback-formatted transcripts;
# the solution-bearing formats add their own slice on top so the copy skill
# the richer teachers rely on actually forms at this scale
SOLUTION_SLICE = (
    (ContextKind.PEER_SOLUTION_FEEDBACK, 0.12),
    (ContextKind.PEER_HINTS, 0.08),
    (ContextKind.OWN_SOLUTION_FEEDBACK, 0.08),
    (ContextKind.EXPERT_PREAMBLE, 0.04),
)


def _wrong_attempt(task: TaskInstance, rng: np.random.Generator) -> str:
    if task.kind is TaskKind.ARITHMETIC:
        value = int(task.hidden_answer)
        delta = int(rng.integers(1, 100)) * (1 if rng.random() < 0.5 else -1)
        return str(value + delta)
    answer = task.hidden_answer
    if rng.random() < 0.2 and len(answer) > 3:
        return answer[:-1]
    pos = int(rng.integers(0, len(answer)))
    alphabet = "abcdefghijklmnopqrstuvwxyz".replace(answer[pos], "")
    ch = alphabet[rng.integers(0, len(alphabet))]
    return answer[:pos] + ch + answer[pos + 1:]


def build_pretrain_corpus(kind: TaskKind, size: int, seed: int,
                          context_fraction: float = 0.25,
                          max_seq_len: int = 512) -> list[tuple[list[int], int]]:
    """Solved transcripts: (tokens, prompt_len) pairs.

    context_fraction of the transcripts are feedback-formatted (prompt +
    feedback from a synthetic wrong attempt + correct answer); the
    SOLUTION_SLICE formats (quoted peer solutions, hints, preamble) are added
    on top with the true answer as the peer, so the model learns to exploit
    every privileged prompt shape in-context. The remainder are plain
    prompt -> answer transcripts.
    """
    rng = np.random.default_rng(seed)
    gen = _gen_arithmetic if TaskKind(kind) is TaskKind.ARITHMETIC else _gen_string
    sol_kinds, sol_weights = zip(*SOLUTION_SLICE)
    sol_total = sum(sol_weights)
    corpus = []
    for i in range(size):
        prompt, answer = gen(rng)
        task = TaskInstance(f"pre-{seed}-{i}", TaskKind(kind), prompt, answer)
        draw = rng.random()
        ckind = None
        if draw < context_fraction:
            ckind = ContextKind.FEEDBACK
        elif draw < context_fraction + sol_total:
            ckind = sol_kinds[int(rng.choice(
                len(sol_kinds), p=np.asarray(sol_weights) / sol_total))]
        if ckind is None:
            text = prompt
        else:
            # half the own attempts pass, mirroring the conditional section
            # variety seen at measurement time (e.g. a solution-only render
            # when the rollout succeeded and no feedback exists)
            passes_own = ckind in (ContextKind.OWN_SOLUTION_FEEDBACK,
                                   ContextKind.PEER_SOLUTION_FEEDBACK) \
                and rng.random() < 0.5
            own = answer if passes_own else _wrong_attempt(task, rng)
            inputs = ContextInputs(prompt_text=prompt, own_response=own,
                                   own_verdict=verify(task, own),
                                   peer_correct_response=answer)
            text = render_teacher_prompt(ckind, inputs,
                                         max_tokens=max_seq_len - 16).text
        tokens = encode_prompt(text) + encode_text(answer) + [EOS]
        if len(tokens) <= max_seq_len:
            corpus.append((tokens, len(tokens) - len(answer) - 1))
    return corpus


def pretrain(params: dict[str, np.ndarray], model_cfg: ModelConfig,
             corpus: list[tuple[list[int], int]], epochs: int, lr: float,
             seed: int = 0, batch_size: int = 32,
             log_every: int = 50) -> tuple[dict[str, np.ndarray], list[float]]:
    """Next-token cross-entropy over the answer segment of each transcript.

    Prompt positions are masked out of the loss: they are mostly random task
    strings, and their gradient noise drowns the handful of answer tokens in
    the long privileged-context transcripts (measured directly: with a
    full-sequence loss the context slice never trains). Batches are bucketed
    by length to bound padding waste; batch order is reshuffled each epoch.
    Returns the trained parameters and the per-batch loss trace.
    """
    # length-sorted greedy packing: long transcripts get smaller batches so
    # the padded token area per batch stays bounded
    order = sorted(range(len(corpus)), key=lambda i: len(corpus[i][0]))
    token_budget = batch_size * 120
    batches, current = [], []
    for i in order:
        width = len(corpus[i][0])
        if current and (len(current) >= batch_size
                        or (len(current) + 1) * width > token_budget):
            batches.append(current)
            current = []
        current.append(i)
    if current:
        batches.append(current)
    params = copy_params(params)
    optim = OptimState.zeros_like(params)
    opt_cfg = DistillConfig(learning_rate=lr, weight_decay=0.0,
                            grad_clip_norm=1.0)
    losses: list[float] = []
    for epoch in range(epochs):
        rng = np.random.default_rng(derive_seed(seed, "pretrain", epoch))
        for bi in rng.permutation(len(batches)):
            ids = batches[int(bi)]
            width = max(len(corpus[i][0]) for i in ids)
            tokens = np.full((len(ids), width), PAD, dtype=np.int64)
            prompt_lens = np.asarray([corpus[i][1] for i in ids])
            for row, i in enumerate(ids):
                seq = corpus[i][0]
                tokens[row, :len(seq)] = seq
            loss, grads = _lm_loss_grads(params, model_cfg, tokens,
                                         prompt_lens)
            losses.append(loss)
            try:
                params, optim = distill.clip_then_adamw(params, grads, optim,
                                                        opt_cfg)
            except NonFiniteGradientError as exc:
                log.warning("pretrain batch skipped: %s", exc)
            if log_every and len(losses) % log_every == 0:
                log.info("pretrain epoch %d batch %d loss %.4f",
                         epoch, len(losses), loss)
    return params, losses


def _lm_loss_grads(params, model_cfg: ModelConfig, tokens: np.ndarray,
                   prompt_lens: np.ndarray):
    """Answer-segment next-token NLL over a right-padded (B, T) batch."""
    inputs, targets = tokens[:, :-1], tokens[:, 1:]
    pos = np.arange(targets.shape[1])[None, :]
    mask = ((targets != PAD)
            & (pos >= prompt_lens[:, None] - 1)).astype(np.float64)[..., None]
    n_real = mask.sum()
    tape = Tape()
    pnodes = register_params(tape, params)
    logits = logits_on_tape(tape, pnodes, model_cfg, inputs)
    logprobs = tape.log_softmax(logits)
    picked = tape.take_last(logprobs, targets[..., None])
    masked = tape.multiply(picked, tape.constant(mask))
    loss = tape.multiply(tape.reduce_mean(masked),
                         -float(mask.size) / float(n_real))
    grads = backward(tape, loss)
    return float(tape.value(loss)), grads
