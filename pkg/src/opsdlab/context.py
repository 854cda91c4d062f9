"""Privileged-prompt construction for the six self-teacher variants.

Each variant is a text template shipped under templates/ with {placeholder}
markers and optional [if_*]...[/if_*] blocks that are kept or dropped per
sample. Whenever a variant's conditional input is missing entirely (no failed
attempt to quote, no correct peer), the rendering falls back to the plain
prompt so the teacher is always well defined.

The plain prompt appears verbatim inside every rendering; richer variants
only ever append privileged sections around it.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from typing import Optional

from .env import Verdict

log = logging.getLogger(__name__)

PREAMBLE_VERSION = 1


class ContextKind(str, Enum):
    NONE = "none"
    EXPERT_PREAMBLE = "expert_preamble"
    FEEDBACK = "feedback"
    PEER_HINTS = "peer_hints"
    OWN_SOLUTION_FEEDBACK = "own_solution_feedback"
    PEER_SOLUTION_FEEDBACK = "peer_solution_feedback"


ALL_CONTEXT_KINDS = tuple(ContextKind)


@dataclass(frozen=True)
class ContextInputs:
    prompt_text: str
    own_response: Optional[str] = None
    own_verdict: Optional[Verdict] = None
    peer_correct_response: Optional[str] = None

    def __post_init__(self):
        if (self.own_response is None) != (self.own_verdict is None):
            raise ValueError("own_verdict present iff own_response present")


@dataclass(frozen=True)
class Rendering:
    text: str
    fallback: bool
    truncated: bool


_BLOCK = re.compile(r"\[(if_[a-z_]+)\](.*?)\[/\1\]", re.DOTALL)


def _load(name: str) -> str:
    return (resources.files("opsdlab") / "templates" / name).read_text("utf-8")


_TEMPLATES = {kind: _load(f"{kind.value}.txt") for kind in ContextKind}
EXPERT_PREAMBLE_TEXT = _load(f"expert_preamble_v{PREAMBLE_VERSION}.txt").rstrip("\n")


def hint_from_solution(solution: str) -> str:
    """Mask every second character (odd indices) so the hint is strictly
    weaker than the full solution."""
    return "".join("_" if i % 2 else ch for i, ch in enumerate(solution))


def _render(kind: ContextKind, conds: dict[str, bool],
            subs: dict[str, str]) -> str:
    text = _BLOCK.sub(
        lambda m: m.group(2) if conds.get(m.group(1)[3:], False) else "",
        _TEMPLATES[kind])
    for key, val in subs.items():
        text = text.replace("{" + key + "}", val)
    return text


def render_teacher_prompt(kind: ContextKind, inputs: ContextInputs,
                          max_tokens: Optional[int] = None) -> Rendering:
    """Full rendering result: text plus fallback/truncation flags.

    max_tokens, when given, bounds the token length of the encoded prompt
    (len(utf-8 bytes) + 2 framing tokens); over-budget renderings are trimmed
    from the tail of the feedback section first, then the solution, then the
    whole string.
    """
    kind = ContextKind(kind)
    failed_fb = (inputs.own_verdict.feedback_text
                 if inputs.own_verdict is not None
                 and not inputs.own_verdict.passed else None)

    def build(fb: Optional[str], sol: Optional[str]) -> tuple[str, bool]:
        subs = {"prompt": inputs.prompt_text}
        if kind is ContextKind.NONE:
            return _render(kind, {}, subs), False
        if kind is ContextKind.EXPERT_PREAMBLE:
            subs["preamble"] = EXPERT_PREAMBLE_TEXT
            return _render(kind, {}, subs), False
        if kind is ContextKind.FEEDBACK:
            if fb is None:
                return inputs.prompt_text, True
            subs["feedback"] = fb
            return _render(kind, {}, subs), False
        if kind is ContextKind.PEER_HINTS:
            if sol is None:
                return inputs.prompt_text, True
            subs["hint"] = hint_from_solution(sol)
            return _render(kind, {}, subs), False
        if kind is ContextKind.OWN_SOLUTION_FEEDBACK:
            if inputs.own_response is None:
                return inputs.prompt_text, True
            passed = inputs.own_verdict.passed
            subs["solution"] = inputs.own_response if passed else ""
            subs["feedback"] = fb if fb is not None else ""
            return _render(kind, {"passed": passed, "failed": not passed},
                           subs), False
        # PEER_SOLUTION_FEEDBACK: drop whichever section lacks its input
        if sol is None and fb is None:
            return inputs.prompt_text, True
        subs["solution"] = sol if sol is not None else ""
        subs["feedback"] = fb if fb is not None else ""
        return _render(kind, {"solution": sol is not None,
                              "feedback": fb is not None}, subs), False

    fb, sol = failed_fb, inputs.peer_correct_response
    text, fallback = build(fb, sol)
    truncated = False
    if max_tokens is not None:
        budget = max_tokens - 2  # BOS and SEP framing
        while len(text.encode("utf-8")) > budget and ((fb and len(fb) > 0)
                                                      or (sol and len(sol) > 0)):
            truncated = True
            if fb:
                fb = fb[:-1] or None
            elif sol:
                sol = sol[:-1] or None
            text, fallback = build(fb, sol)
        raw = text.encode("utf-8")
        if len(raw) > budget:
            truncated = True
            text = raw[:budget].decode("utf-8", errors="ignore")
        if truncated:
            log.warning("teacher prompt truncated to %d tokens (%s)",
                        max_tokens, kind.value)
    return Rendering(text=text, fallback=fallback, truncated=truncated)


def build_teacher_prompt(kind: ContextKind, inputs: ContextInputs,
                         max_tokens: Optional[int] = None) -> str:
    return render_teacher_prompt(kind, inputs, max_tokens).text
