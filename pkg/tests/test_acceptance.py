"""Acceptance criteria, one test per criterion, at their stated tolerances.

The heavyweight fixtures (warm-start checkpoint, 4 contexts x 3 seeds of
50-step runs on the S model) are session-scoped and shared between criteria
4, 5, 6 and 9. A committed warm-start checkpoint under tests/fixtures/ is
reused when its recorded pretraining config hash matches the current
defaults; otherwise it is rebuilt from scratch (slow but equivalent:
`opsdlab pretrain` with default config writes the identical file).
"""

import json
import math
import os
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from opsdlab import distill, evalproto, harness, lawfit, trainer
from opsdlab.context import ContextInputs, ContextKind, build_teacher_prompt
from opsdlab.distill import opsd_loss, opsd_loss_value
from opsdlab.env import TaskKind, gen_dataset, verify
from opsdlab.evalproto import binomial_se, improvement, measure_gap
from opsdlab.harness import (ensure_datasets, ensure_warmstart,
                             pretrain_config_hash, resolve_config, run_one)
from opsdlab.lawfit import LawPoint, fit_law, ols_fit, pearson, predict, spearman
from opsdlab.model import (DESK_SIZES, EOS, DecodingParams, encode_prompt,
                           encode_text, init_params, load_checkpoint,
                           register_params, sample, sample_token,
                           sequence_logprob_rows_on_tape)
from opsdlab.numcore import Tape, backward
from opsdlab.seeding import derive_seed
from opsdlab.trainer import TrainConfig, init_train_state, train_step

FIXTURE_DIR = Path(__file__).parent / "fixtures"
LAW_CONTEXTS = (ContextKind.NONE, ContextKind.FEEDBACK, ContextKind.PEER_HINTS,
                ContextKind.PEER_SOLUTION_FEEDBACK)
SEEDS = (1, 2, 3)


def report(criterion: int, name: str) -> None:
    print(f"acceptance criterion {criterion} ({name}): PASS")


@pytest.fixture(scope="session")
def cfg():
    return resolve_config()


@pytest.fixture(scope="session")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def warm_ckpt(cfg, workdir):
    target = workdir / "warmstart_s.ckpt"
    fixture = FIXTURE_DIR / "warmstart_s.ckpt"
    if fixture.exists():
        _, _, meta = load_checkpoint(fixture)
        if meta.get("pretrain_hash") == pretrain_config_hash(cfg, "s"):
            shutil.copy(fixture, target)
    if not target.exists():
        ensure_warmstart(cfg, str(workdir))
    return str(target)


@pytest.fixture(scope="session")
def datasets(cfg, workdir):
    return ensure_datasets(cfg, str(workdir / "data"))


@pytest.fixture(scope="session")
def law_runs(cfg, workdir, warm_ckpt, datasets):
    """(context, seed) -> (GapRecord, validation points, elapsed seconds)."""
    train_tasks, val_tasks = datasets
    csv_path = str(workdir / "law.csv")
    out: dict = {}
    for context in LAW_CONTEXTS:
        for seed in SEEDS:
            run_dir = workdir / f"run_{context.value}_s{seed}"
            t0 = time.time()
            record = run_one(cfg, context, seed, warm_ckpt, train_tasks,
                             val_tasks, str(run_dir), csv_path)
            elapsed = time.time() - t0
            with open(run_dir / "run_record.jsonl") as f:
                lines = [json.loads(l) for l in f]
            validations = [l for l in lines if l["type"] == "validation"]
            out[(context.value, seed)] = (record, validations, elapsed)
            print(f"[law run] {context.value} seed {seed}: "
                  f"gap {record.initial_gap:+.4f} "
                  f"improvement {record.improvement:+.4f} "
                  f"({elapsed:.0f}s)")
    return out


def _rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)


class TestCriterion1GradientFidelity:
    def test_full_opsd_gradient_matches_finite_differences(self):
        start = time.time()
        mc = DESK_SIZES["xs"]
        params = init_params(mc, 17)
        _, val = gen_dataset(TaskKind.STRING_TRANSFORM, 2, 1, 5)
        task = val[0]
        response = encode_text("gfedcba"[:7]) + [EOS]  # 8-token rollout
        assert len(response) == 8
        fb = verify(task, "zzz").feedback_text
        teacher_text = build_teacher_prompt(
            ContextKind.PEER_SOLUTION_FEEDBACK,
            ContextInputs(task.prompt_text, "zzz",
                          verify(task, "zzz"), task.hidden_answer))
        s_seq = encode_prompt(task.prompt_text) + response
        t_seq = encode_prompt(teacher_text) + response

        def build(ps):
            tape = Tape()
            s_nodes = register_params(tape, ps, prefix="student.")
            t_nodes = register_params(tape, params, prefix="teacher.")
            s_rows = sequence_logprob_rows_on_tape(
                tape, s_nodes, mc, s_seq, len(s_seq) - len(response))
            t_rows = sequence_logprob_rows_on_tape(
                tape, t_nodes, mc, t_seq, len(t_seq) - len(response))
            return tape, opsd_loss(tape, s_rows, t_rows, len(response), 20)

        tape, loss = build(params)
        grads = backward(tape, loss)

        rng = np.random.default_rng(0)
        step = 1e-5
        worst = 0.0
        for name, arr in params.items():
            flat = arr.reshape(-1)
            count = min(6, flat.size)
            for idx in rng.choice(flat.size, size=count, replace=False):
                pert = {k: v.copy() for k, v in params.items()}
                pflat = pert[name].reshape(-1)
                pflat[idx] += step
                t1, l1 = build(pert)
                pflat[idx] -= 2 * step
                t2, l2 = build(pert)
                fd = (float(t1.value(l1)) - float(t2.value(l2))) / (2 * step)
                bp = grads["student." + name].reshape(-1)[idx]
                worst = max(worst, float(_rel_err(fd, bp)))
        elapsed = time.time() - start
        assert worst < 1e-4, f"max relative error {worst}"
        assert elapsed < 60.0, f"took {elapsed:.1f}s"
        report(1, f"gradient fidelity, max rel err {worst:.2e}, "
                  f"{elapsed:.1f}s")


class TestCriterion2KlOracle:
    def test_1000_random_distributions(self):
        rng = np.random.default_rng(42)
        worst = 0.0
        for _ in range(1000):
            vocab = int(rng.integers(2, 17))
            k = int(rng.integers(1, vocab + 1))
            rows = int(rng.integers(1, 4))

            def rand_rows():
                x = rng.normal(scale=2.5, size=(rows, vocab))
                m = x.max(-1, keepdims=True)
                return x - m - np.log(np.exp(x - m).sum(-1, keepdims=True))

            s, t = rand_rows(), rand_rows()
            got = opsd_loss_value(s, t, k)
            want = 0.0
            for s_row, t_row in zip(s, t):
                order = np.argsort(-t_row, kind="stable")[:k]
                sp = np.exp(s_row[order])
                sp /= sp.sum()
                tp = np.exp(t_row[order])
                tp /= tp.sum()
                want += float((sp * (np.log(sp) - np.log(tp))).sum())
            want /= rows
            worst = max(worst, abs(got - want))
        assert worst < 1e-9, worst
        report(2, f"KL oracle over 1000 draws, max abs err {worst:.2e}")


class TestCriterion3Stopgrad:
    def test_teacher_gradients_exactly_zero_100_instances(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            vocab = int(rng.integers(2, 12))
            rows = int(rng.integers(1, 4))
            k = int(rng.integers(1, vocab + 1))

            def rand_rows():
                x = rng.normal(scale=2.0, size=(rows, vocab))
                m = x.max(-1, keepdims=True)
                return x - m - np.log(np.exp(x - m).sum(-1, keepdims=True))

            tape = Tape()
            s = tape.param("student_rows", rand_rows())
            t = tape.param("teacher_rows", rand_rows())
            grads = backward(tape, opsd_loss(tape, s, t, rows, k))
            assert np.array_equal(grads["teacher_rows"],
                                  np.zeros((rows, vocab)))
        report(3, "stopgrad: teacher gradients exactly zero on 100 instances")

    def test_full_model_teacher_parameters_zero(self):
        mc = DESK_SIZES["xs"]
        student = init_params(mc, 1)
        teacher = init_params(mc, 2)  # deliberately different weights
        response = encode_text("ab") + [EOS]
        s_seq = encode_prompt("REV: ba") + response
        t_seq = encode_prompt("REV: ba\nCorrect solution:\nab\nCorrectly"
                              " solve the original question.") + response
        tape = Tape()
        s_nodes = register_params(tape, student, prefix="student.")
        t_nodes = register_params(tape, teacher, prefix="teacher.")
        s_rows = sequence_logprob_rows_on_tape(tape, s_nodes, mc, s_seq,
                                               len(s_seq) - 3)
        t_rows = sequence_logprob_rows_on_tape(tape, t_nodes, mc, t_seq,
                                               len(t_seq) - 3)
        grads = backward(tape, opsd_loss(tape, s_rows, t_rows, 3, 20))
        for name, g in grads.items():
            if name.startswith("teacher."):
                assert np.array_equal(g, np.zeros_like(g)), name
            else:
                assert np.isfinite(g).all()


@pytest.mark.slow
class TestCriterion4ControlNull:
    def test_loss_and_gap_vanish_for_control_context(self, cfg, warm_ckpt,
                                                     datasets):
        mc, params, _ = load_checkpoint(warm_ckpt)
        train_tasks, val_tasks = datasets
        tc = harness.train_config(cfg, ContextKind.NONE, seed=123)
        state = init_train_state(tc, student=params)
        metrics = train_step(state, train_tasks[:tc.prompts_per_step])
        assert metrics.mean_loss < 1e-10

        n = cfg["train.rollouts_per_prompt"]
        trials = len(val_tasks) * n
        assert trials >= 200
        rec = measure_gap(params, mc, ContextKind.NONE, val_tasks,
                          harness.train_decoding(cfg), n,
                          derive_seed(123, "gap"))
        se = binomial_se(rec.student_acc, trials)
        assert abs(rec.initial_gap) < 2 * se
        report(4, f"control null: loss {metrics.mean_loss:.1e}, "
                  f"|gap| {abs(rec.initial_gap):.4f} < 2SE {2 * se:.4f} "
                  f"over {trials} trials")


@pytest.mark.slow
class TestCriterion5Convergence:
    def test_student_rises_and_gap_shrinks(self, law_runs):
        initial_acc, final_acc, initial_gap, final_gap, times = [], [], [], [], []
        for seed in SEEDS:
            _, validations, elapsed = law_runs[
                ("peer_solution_feedback", seed)]
            first, last = validations[0], validations[-1]
            assert first["step"] == 0 and last["step"] == 50
            initial_acc.append(first["student_mean_at_4"])
            final_acc.append(last["student_mean_at_4"])
            initial_gap.append(first["teacher_mean_at_4"]
                               - first["student_mean_at_4"])
            final_gap.append(last["teacher_mean_at_4"]
                             - last["student_mean_at_4"])
            times.append(elapsed)
        assert np.median(final_acc) >= np.median(initial_acc)
        assert np.median(final_gap) < np.median(initial_gap)
        assert max(times) < 1800.0, f"slowest seed took {max(times):.0f}s"
        report(5, f"convergence: student {np.median(initial_acc):.3f} -> "
                  f"{np.median(final_acc):.3f}, gap "
                  f"{np.median(initial_gap):.3f} -> "
                  f"{np.median(final_gap):.3f}, "
                  f"max {max(times):.0f}s/seed")


@pytest.mark.slow
class TestCriterion6PredictiveLaw:
    def test_spearman_and_slope(self, law_runs):
        points = []
        for context in LAW_CONTEXTS:
            gaps = [law_runs[(context.value, s)][0].initial_gap for s in SEEDS]
            imps = [law_runs[(context.value, s)][0].improvement for s in SEEDS]
            points.append(LawPoint(float(np.mean(gaps)), float(np.mean(imps)),
                                   label=context.value))
        assert len(points) >= 4
        rho, _ = spearman(points)
        slope, intercept, r2 = ols_fit(points)
        for p in points:
            print(f"[law point] {p.label}: gap {p.x:+.4f} "
                  f"improvement {p.y:+.4f}")
        assert rho > 0.5, f"spearman {rho}"
        assert slope > 0.0, f"slope {slope}"
        report(6, f"predictive law: spearman {rho:.3f}, slope {slope:.3f}, "
                  f"R^2 {r2:.3f} over {len(points)} contexts x 3 seeds")


class TestCriterion7StatisticsFixtures:
    def test_caption_constants_and_oracles_under_one_second(self):
        start = time.time()
        xs = [0.02, 0.05, 0.09, 0.12, 0.16, 0.20]

        fit_a = fit_law([LawPoint(x, 1.492 * x - 0.003) for x in xs])
        assert abs(fit_a.slope - 1.492) < 1e-9
        assert abs(fit_a.intercept + 0.003) < 1e-9
        assert abs(fit_a.r_squared - 1.0) < 1e-9
        assert abs(fit_a.loocv_rmse) < 1e-9
        assert abs(fit_a.loocv_r_squared - 1.0) < 1e-9
        assert abs(predict(fit_a, 0.10) - 0.1462) < 1e-9

        fit_b = fit_law([LawPoint(x, 0.663 * x + 0.004) for x in xs])
        assert abs(fit_b.slope - 0.663) < 1e-9
        assert abs(fit_b.intercept - 0.004) < 1e-9
        assert abs(predict(fit_b, 0.10) - 0.0703) < 1e-9

        r, _ = pearson([LawPoint(1, 2), LawPoint(2, 1), LawPoint(3, 4)])
        assert abs(r - 0.6546537) < 1e-6

        rho3, p3 = spearman([LawPoint(1, 1), LawPoint(2, 2), LawPoint(3, 5)])
        assert abs(p3 - 2 / 6) < 1e-6
        rho6, p6 = spearman([LawPoint(x, 2 * x) for x in xs])
        assert abs(rho6 - 1.0) < 1e-6
        assert abs(p6 - 2 / 720) < 1e-6

        elapsed = time.time() - start
        assert elapsed < 1.0
        report(7, f"statistics fixtures in {elapsed * 1000:.0f}ms")


class TestCriterion8Sampling:
    def test_temperature_zero_determinism(self):
        mc = DESK_SIZES["xs"]
        params = init_params(mc, 3)
        prompt = encode_prompt("REV: abc")
        dec = DecodingParams(0.0, 1.0, 8)
        outs = {tuple(sample(params, mc, prompt, dec, seed))
                for seed in range(8)}
        assert len(outs) == 1

    def test_nucleus_exclusion_100k(self):
        probs = np.array([0.5, 0.3, 0.15, 0.05])
        logits = np.log(probs)
        rng = np.random.default_rng(0)
        # top_p = 0.95: cumulative mass reaches 0.95 at token 2, excluding 3
        draws = {sample_token(logits, 1.0, 0.95, rng) for _ in range(100_000)}
        assert draws == {0, 1, 2}

    def test_frequencies_within_3se_100k(self):
        probs = np.array([0.5, 0.35, 0.15])
        logits = np.log(probs)
        rng = np.random.default_rng(1)
        draws = np.array([sample_token(logits, 1.0, 1.0, rng)
                          for _ in range(100_000)])
        for tok, p in enumerate(probs):
            freq = float((draws == tok).mean())
            se = math.sqrt(p * (1 - p) / len(draws))
            assert abs(freq - p) < 3 * se, (tok, freq, p)
        report(8, "sampling: argmax determinism, nucleus exclusion, "
                  "frequencies within 3 SE over 100k draws")


@pytest.mark.slow
class TestCriterion9ProtocolSeparation:
    def test_decoding_configs_in_artifacts(self, cfg, workdir, law_runs):
        # resolved config embedded in every run record header
        run_dir = workdir / "run_peer_solution_feedback_s1"
        with open(run_dir / "run_record.jsonl") as f:
            header = json.loads(f.readline())
        embedded = header["provenance"]["config"]
        assert embedded["train.temperature"] == 1.0
        assert embedded["train.top_p"] == 1.0
        assert embedded["eval.temperature"] == 0.6
        assert embedded["eval.top_p"] == 0.95
        assert embedded["eval.n_samples"] == 4
        assert header["provenance"]["config_hash"] == harness.config_hash(cfg)
        # the CSV provenance ties the law rows to the same config
        with open(workdir / "law.csv") as f:
            first = f.readline()
        assert first.strip() == f"# config_hash={harness.config_hash(cfg)}"
        # gap uses train decoding; improvement refuses anything but val decoding
        td, vd = harness.train_decoding(cfg), harness.val_decoding(cfg)
        assert (td.temperature, td.top_p) == (1.0, 1.0)
        assert (vd.temperature, vd.top_p, vd.n_samples) == (0.6, 0.95, 4)
        mc = DESK_SIZES["xs"]
        params = init_params(mc, 0)
        with pytest.raises(Exception):
            improvement((mc, params), (mc, params), [], td, 0)
        report(9, "protocol separation: train (1.0, 1.0) vs validation "
                  "(0.6, 0.95, n=4), asserted from embedded configs")


@pytest.mark.slow
class TestCriterion10Determinism:
    def test_identical_config_twice_bit_identical_records(self, tmp_path):
        overrides = {
            "model.size": "xs",
            "env.n_train": 8,
            "env.n_val": 4,
            "pretrain.corpus_size": 60,
            "pretrain.epochs": 1,
            "train.steps": 3,
            "train.prompts_per_step": 2,
            "train.rollouts_per_prompt": 2,
            "train.validate_every": 2,
            "seeds": [9],
        }
        cfg = resolve_config(overrides)
        blobs = []
        for name in ("first", "second"):
            out = tmp_path / name
            train_tasks, val_tasks = ensure_datasets(cfg, str(out / "data"))
            warm = ensure_warmstart(cfg, str(out))
            run_one(cfg, ContextKind.PEER_SOLUTION_FEEDBACK, 9, warm,
                    train_tasks, val_tasks, str(out / "run"),
                    str(out / "law.csv"))
            blobs.append((out / "run" / "run_record.jsonl").read_bytes())
            blobs.append((out / "law.csv").read_bytes())
        assert blobs[0] == blobs[2]
        assert blobs[1] == blobs[3]
        report(10, "determinism: bit-identical run records and CSV rows "
                   "across two identical runs")
