"""Distillation objective and optimizer steps.

The loss is a per-token reverse KL between the student and a frozen teacher,
with both distributions restricted to the teacher's top-k tokens at each
position and renormalized on that support. Restricting-and-renormalizing both
sides keeps the loss a true KL: nonnegative, zero iff the truncated
distributions coincide. The alternative (masking the tail into a bucket) is
isolated behind topk_truncate/opsd_loss so it could be swapped without
touching callers.

The teacher branch is wrapped in stop_gradient, so backward returns exact
zeros for teacher parameters; the teacher itself only moves through the
exponential-moving-average update.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numcore import ContractError, Tape, backward

ADAM_EPS = 1e-8


class NonFiniteGradientError(ArithmeticError):
    """Raised when a gradient step would apply non-finite values."""


@dataclass(frozen=True)
class DistillConfig:
    ema_rate: float = 0.01
    top_k: int = 20
    learning_rate: float = 3e-4  # desk-scale default; 1e-6 at full scale
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    grad_clip_norm: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.ema_rate <= 1.0:
            raise ContractError("ema_rate must be in [0, 1]")
        if self.top_k < 1:
            raise ContractError("top_k must be >= 1")
        if self.learning_rate <= 0 or self.grad_clip_norm <= 0:
            raise ContractError("learning_rate and grad_clip_norm must be > 0")


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "OptimState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()},
                   step=0)


def topk_truncate(teacher_logprobs: np.ndarray,
                  k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k support (ties by lowest id) and renormalized log-probs on it."""
    lp = np.asarray(teacher_logprobs, dtype=np.float64)
    if lp.ndim != 1:
        raise ContractError("teacher_logprobs must be a vector")
    if not 1 <= k <= lp.shape[0]:
        raise ContractError(f"k={k} out of range for vocab {lp.shape[0]}")
    support = np.argsort(-lp, kind="stable")[:k]
    sub = lp[support]
    renorm = sub - _logsumexp(sub)
    return support, renorm


def _logsumexp(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))).squeeze(-1)


def topk_support_rows(teacher_rows: np.ndarray, k: int) -> np.ndarray:
    """(T, k) per-row top-k token ids, ties by lowest id."""
    if not 1 <= k <= teacher_rows.shape[-1]:
        raise ContractError(f"k={k} out of range")
    return np.argsort(-teacher_rows, kind="stable", axis=-1)[..., :k]


def opsd_loss(tape: Tape, student_rows: int, teacher_rows: int,
              response_len: int, k: int) -> int:
    """Scalar loss node: mean over positions of the truncated reverse KL.

    student_rows / teacher_rows are (response_len, vocab) log-probability
    nodes aligned on the same rollout positions. The teacher side is frozen
    with stop_gradient (applied here as well, so callers cannot forget).
    """
    s_val, t_val = tape.value(student_rows), tape.value(teacher_rows)
    if s_val.shape != t_val.shape or s_val.ndim != 2:
        raise ContractError("student/teacher rows must share (len, vocab)")
    if s_val.shape[0] != response_len:
        raise ContractError("rows do not match response_len")
    support = topk_support_rows(t_val, k)

    t_frozen = tape.stop_gradient(teacher_rows)
    s_sub = tape.take_last(student_rows, support)
    t_sub = tape.take_last(t_frozen, support)
    s_log = tape.log_softmax(s_sub)   # renormalize on the support
    t_log = tape.log_softmax(t_sub)
    s_prob = tape.softmax(s_sub)
    diff = tape.add(s_log, tape.multiply(t_log, -1.0))
    # mean over (T, k) times k = (1/T) sum_t sum_i p_i (log p_i - log q_i)
    return tape.multiply(tape.reduce_mean(tape.multiply(s_prob, diff)),
                         float(k))


def opsd_loss_value(student_rows: np.ndarray, teacher_rows: np.ndarray,
                    k: int) -> float:
    """Loss value only, for logging and oracle-style recomputation."""
    tape = Tape()
    s = tape.constant(student_rows)
    t = tape.constant(teacher_rows)
    nid = opsd_loss(tape, s, t, np.asarray(student_rows).shape[0], k)
    return float(tape.value(nid))


def ema_update(teacher: dict[str, np.ndarray], student: dict[str, np.ndarray],
               rate: float) -> dict[str, np.ndarray]:
    """teacher' = (1 - rate) * teacher + rate * student, elementwise."""
    if teacher.keys() != student.keys():
        raise ContractError("teacher/student parameter key sets differ")
    if rate == 0.0:
        return {k: v.copy() for k, v in teacher.items()}
    if rate == 1.0:
        return {k: v.copy() for k, v in student.items()}
    out = {}
    for key, tv in teacher.items():
        sv = student[key]
        if sv.shape != tv.shape:
            raise ContractError(f"shape mismatch for {key!r}")
        out[key] = (1.0 - rate) * tv + rate * sv
    return out


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.square(g).sum())
                             for g in grads.values())))


def clip_then_adamw(params: dict[str, np.ndarray],
                    grads: dict[str, np.ndarray], state: OptimState,
                    cfg: DistillConfig) -> tuple[dict[str, np.ndarray],
                                                 OptimState]:
    """Global-norm clipping followed by a bias-corrected AdamW step.

    Weight decay is decoupled: with zero gradients the update reduces to
    params * (1 - lr * wd). Raises NonFiniteGradientError (step to be
    skipped and logged by the caller) when gradients are not finite.
    """
    if params.keys() != grads.keys():
        raise ContractError("params/grads key sets differ")
    norm = global_grad_norm(grads)
    if not np.isfinite(norm):
        raise NonFiniteGradientError(f"gradient norm is {norm}")
    scale = cfg.grad_clip_norm / norm if norm > cfg.grad_clip_norm else 1.0
    b1, b2 = cfg.betas
    t = state.step + 1
    lr = cfg.learning_rate
    new_params, new_m, new_v = {}, {}, {}
    for key, p in params.items():
        g = grads[key] * scale
        m = b1 * state.m[key] + (1 - b1) * g
        v = b2 * state.v[key] + (1 - b2) * np.square(g)
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_params[key] = p - lr * (m_hat / (np.sqrt(v_hat) + ADAM_EPS)
                                    + cfg.weight_decay * p)
        new_m[key], new_v[key] = m, v
    return new_params, OptimState(m=new_m, v=new_v, step=t)
