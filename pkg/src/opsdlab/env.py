"""Deterministic verifiable toy tasks with rich textual feedback.

Two kinds:
  arithmetic        "EVAL a OP b OP c ="  with operands 0..99, OP in {+,-,*};
                    the answer is the integer value under standard precedence.
  string_transform  "REV: s" with s a random lowercase string of length 3..8;
                    the answer is s reversed.

Verdicts are exact-match (whitespace-stripped). Failure feedback follows a
fixed grammar so that downstream parsers and golden tests can rely on the
exact bytes:
  arithmetic:  "feedback: your answer is not a valid integer"
               "feedback: your answer {a} is too {low|high}; the correct
                answer has {d} digits"
  string:      "feedback: expected length {n}, got {m}"
               "feedback: first mismatch at index {i}: expected character '{c}'"

The feedback is directional but never leaks the answer, so a privileged
listener is helped without being handed the result outright.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum

import numpy as np


class TaskKind(str, Enum):
    ARITHMETIC = "arithmetic"
    STRING_TRANSFORM = "string_transform"


@dataclass(frozen=True)
class TaskInstance:
    task_id: str
    kind: TaskKind
    prompt_text: str
    hidden_answer: str


@dataclass(frozen=True)
class Verdict:
    passed: bool
    feedback_text: str

    def __post_init__(self):
        if self.passed and self.feedback_text:
            raise ValueError("passed verdicts carry no feedback")


_CANONICAL_INT = re.compile(r"^-?(0|[1-9][0-9]*)$")
_LOWER = "abcdefghijklmnopqrstuvwxyz"


def _eval_expr(a: int, op1: str, b: int, op2: str, c: int) -> int:
    # standard precedence: * binds before + and -
    if op2 == "*":
        b, c = b * c, None
        return a + b if op1 == "+" else a - b if op1 == "-" else a * b
    left = a * b if op1 == "*" else a + b if op1 == "+" else a - b
    return left + c if op2 == "+" else left - c


def _gen_arithmetic(rng: np.random.Generator) -> tuple[str, str]:
    a, b, c = (int(rng.integers(0, 100)) for _ in range(3))
    op1, op2 = (("+", "-", "*")[rng.integers(0, 3)] for _ in range(2))
    prompt = f"EVAL {a} {op1} {b} {op2} {c} ="
    return prompt, str(_eval_expr(a, op1, b, op2, c))


def _gen_string(rng: np.random.Generator) -> tuple[str, str]:
    n = int(rng.integers(3, 9))
    s = "".join(_LOWER[rng.integers(0, 26)] for _ in range(n))
    return f"REV: {s}", s[::-1]


def gen_dataset(kind: TaskKind, n_train: int, n_val: int,
                seed: int) -> tuple[list[TaskInstance], list[TaskInstance]]:
    """Deterministic per seed; train and val prompt_texts are disjoint."""
    if n_train < 1 or n_val < 1:
        raise ValueError("need n_train >= 1 and n_val >= 1")
    kind = TaskKind(kind)
    rng = np.random.default_rng(seed)
    gen = _gen_arithmetic if kind is TaskKind.ARITHMETIC else _gen_string
    seen: set[str] = set()
    tasks: list[TaskInstance] = []
    while len(tasks) < n_train + n_val:
        prompt, answer = gen(rng)
        if prompt in seen:
            continue
        seen.add(prompt)
        tasks.append(TaskInstance(
            task_id=f"{kind.value}-{seed}-{len(tasks):05d}",
            kind=kind, prompt_text=prompt, hidden_answer=answer))
    return tasks[:n_train], tasks[n_train:]


def verify(task: TaskInstance, response: str) -> Verdict:
    """Exact-match verdict plus grammar-fixed feedback on failure."""
    response = response.strip()
    if response == task.hidden_answer:
        return Verdict(True, "")
    if task.kind is TaskKind.ARITHMETIC:
        if not _CANONICAL_INT.match(response):
            return Verdict(False, "feedback: your answer is not a valid integer")
        got, want = int(response), int(task.hidden_answer)
        direction = "low" if got < want else "high"
        digits = len(str(abs(want)))
        return Verdict(False, f"feedback: your answer {got} is too {direction};"
                              f" the correct answer has {digits} digits")
    want_s = task.hidden_answer
    if len(response) != len(want_s):
        return Verdict(False, f"feedback: expected length {len(want_s)},"
                              f" got {len(response)}")
    i = next(j for j in range(len(want_s)) if response[j] != want_s[j])
    return Verdict(False, f"feedback: first mismatch at index {i}:"
                          f" expected character '{want_s[i]}'")


# ---------------------------------------------------------------------------
# Dataset files: one JSON record per line. hidden_answer is written only when
# private=True; name such files accordingly.
# ---------------------------------------------------------------------------


def save_tasks(path, tasks: list[TaskInstance], private: bool) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in tasks:
            rec = {"task_id": t.task_id, "kind": t.kind.value,
                   "prompt_text": t.prompt_text}
            if private:
                rec["hidden_answer"] = t.hidden_answer
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def load_tasks(path) -> list[TaskInstance]:
    tasks = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            tasks.append(TaskInstance(
                task_id=rec["task_id"], kind=TaskKind(rec["kind"]),
                prompt_text=rec["prompt_text"],
                hidden_answer=rec.get("hidden_answer", "")))
    return tasks
