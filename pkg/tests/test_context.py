import numpy as np
import pytest

from opsdlab.context import (ALL_CONTEXT_KINDS, EXPERT_PREAMBLE_TEXT,
                             ContextInputs, ContextKind, Rendering,
                             build_teacher_prompt, hint_from_solution,
                             render_teacher_prompt)
from opsdlab.env import Verdict

FB = "feedback: first mismatch at index 0: expected character 'c'"

FAILED = ContextInputs(prompt_text="REV: abc", own_response="abc",
                       own_verdict=Verdict(False, FB),
                       peer_correct_response="cba")
PASSED = ContextInputs(prompt_text="REV: abc", own_response="cba",
                       own_verdict=Verdict(True, ""),
                       peer_correct_response="cba")
BARE = ContextInputs(prompt_text="REV: abc")


class TestGoldenRenderings:
    def test_none_is_prompt(self):
        for inputs in (FAILED, PASSED, BARE):
            assert build_teacher_prompt(ContextKind.NONE, inputs) == "REV: abc"

    def test_expert_preamble(self):
        got = build_teacher_prompt(ContextKind.EXPERT_PREAMBLE, BARE)
        assert got == (EXPERT_PREAMBLE_TEXT + "\n---\nREV: abc\n"
                       "Think step by step first, then write the solution.")

    def test_feedback(self):
        got = build_teacher_prompt(ContextKind.FEEDBACK, FAILED)
        assert got == ("REV: abc\n"
                       "The following is feedback from your unsuccessful"
                       " earlier attempt:\n" + FB + "\n"
                       "Correctly solve the original question.")

    def test_peer_hints(self):
        got = build_teacher_prompt(ContextKind.PEER_HINTS, FAILED)
        assert got == ("REV: abc\nCorrect solution:\nc_a\n"
                       "Correctly solve the original question.")

    def test_own_solution_feedback_both_branches(self):
        failed = build_teacher_prompt(ContextKind.OWN_SOLUTION_FEEDBACK, FAILED)
        assert failed == ("REV: abc\nFeedback: " + FB + "\n"
                          "Correctly solve the original question.")
        passed = build_teacher_prompt(ContextKind.OWN_SOLUTION_FEEDBACK, PASSED)
        assert passed == ("REV: abc\nCorrect solution: cba\n"
                          "Correctly solve the original question.")

    def test_peer_solution_feedback_golden(self):
        got = build_teacher_prompt(ContextKind.PEER_SOLUTION_FEEDBACK, FAILED)
        assert got == ("REV: abc\nCorrect solution:\ncba\n"
                       "The following is feedback from your unsuccessful"
                       " earlier attempt:\n" + FB + "\n"
                       "Correctly solve the original question.")


class TestFallbacks:
    def test_feedback_falls_back_on_pass(self):
        r = render_teacher_prompt(ContextKind.FEEDBACK, PASSED)
        assert r.text == "REV: abc" and r.fallback

    def test_feedback_falls_back_without_attempt(self):
        assert build_teacher_prompt(ContextKind.FEEDBACK, BARE) == "REV: abc"

    def test_peer_hints_falls_back_without_peer(self):
        inputs = ContextInputs(prompt_text="REV: abc", own_response="x",
                               own_verdict=Verdict(False, "feedback: expected"
                                                   " length 3, got 1"))
        r = render_teacher_prompt(ContextKind.PEER_HINTS, inputs)
        assert r.text == "REV: abc" and r.fallback

    def test_own_solution_falls_back_without_attempt(self):
        assert build_teacher_prompt(ContextKind.OWN_SOLUTION_FEEDBACK,
                                    BARE) == "REV: abc"

    def test_psf_drops_missing_sections(self):
        # passed rollout with a peer: feedback section dropped
        got = build_teacher_prompt(ContextKind.PEER_SOLUTION_FEEDBACK, PASSED)
        assert got == ("REV: abc\nCorrect solution:\ncba\n"
                       "Correctly solve the original question.")
        # failed rollout without a peer: solution section dropped
        no_peer = ContextInputs(prompt_text="REV: abc", own_response="abc",
                                own_verdict=Verdict(False, FB))
        got = build_teacher_prompt(ContextKind.PEER_SOLUTION_FEEDBACK, no_peer)
        assert got == ("REV: abc\n"
                       "The following is feedback from your unsuccessful"
                       " earlier attempt:\n" + FB + "\n"
                       "Correctly solve the original question.")

    def test_psf_falls_back_when_both_missing(self):
        inputs = ContextInputs(prompt_text="REV: abc", own_response="cba",
                               own_verdict=Verdict(True, ""))
        r = render_teacher_prompt(ContextKind.PEER_SOLUTION_FEEDBACK, inputs)
        assert r.text == "REV: abc" and r.fallback


class TestInvariants:
    def test_prompt_contained_in_every_rendering(self):
        for kind in ALL_CONTEXT_KINDS:
            for inputs in (FAILED, PASSED, BARE):
                assert "REV: abc" in build_teacher_prompt(kind, inputs)

    def test_closed_enumeration(self):
        assert len(ALL_CONTEXT_KINDS) == 6
        assert {k.value for k in ALL_CONTEXT_KINDS} == {
            "none", "expert_preamble", "feedback", "peer_hints",
            "own_solution_feedback", "peer_solution_feedback"}

    def test_inputs_invariant(self):
        with pytest.raises(ValueError):
            ContextInputs(prompt_text="p", own_response="x")
        with pytest.raises(ValueError):
            ContextInputs(prompt_text="p", own_verdict=Verdict(True, ""))

    def test_token_budget_respected(self):
        for kind in ALL_CONTEXT_KINDS:
            for budget in (24, 64, 200):
                r = render_teacher_prompt(kind, FAILED, max_tokens=budget)
                assert len(r.text.encode("utf-8")) + 2 <= budget

    def test_truncation_flag_and_tail_trim(self):
        long_fb = "feedback: expected length 8, got 4000" + "x" * 300
        inputs = ContextInputs(prompt_text="REV: abcdefgh", own_response="z",
                               own_verdict=Verdict(False, long_fb),
                               peer_correct_response="hgfedcba")
        full = render_teacher_prompt(ContextKind.FEEDBACK, inputs)
        assert not full.truncated
        r = render_teacher_prompt(ContextKind.FEEDBACK, inputs, max_tokens=150)
        assert r.truncated
        assert r.text.startswith("REV: abcdefgh\nThe following is feedback")

    def test_hint_masks_every_second_char(self):
        assert hint_from_solution("abcdef") == "a_c_e_"
        assert hint_from_solution("abc") == "a_c"
        assert hint_from_solution("a") == "a"
        assert hint_from_solution("") == ""

    def test_preamble_versioned_constant(self):
        assert EXPERT_PREAMBLE_TEXT.startswith("Checklist, version 1.")
