"""One test per acceptance criterion. Each checks its own runtime budget too.

The terminal summary (see conftest) prints a PASS/FAIL line per criterion.
"""

import itertools
import json
import math
import socket
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from instsynth.bench import RunRecord, cost_report, load_dataset, read_records, run_benchmark
from instsynth.cli import bench_config
from instsynth.config import load_settings
from instsynth.core import AnswerKind, AnswerSpec, ProgramArtifact, SymbolStore, TokenUsage, harmonic_mean
from instsynth.evaluator import analyze, detect_trivial, is_non_trivial, is_well_formed, render_judge_prompt
from instsynth.prompts import generation_messages, render_refine, single_turn
from instsynth.provider import CachedProvider, PriceSheet, ReplayCache, ScriptedProvider, estimate_cost
from instsynth.sandbox import RunOutcome, RunStatus, Sandbox, execute
from instsynth.switch import (
    AlgoVerdict,
    CriteriaVector,
    Decision,
    accuracy,
    calibration_curve,
    rule_verdict,
    train_switch,
    zero_shot_decide,
)
from instsynth.synthesis import Action, LoopConfig, run_loop
from support import (
    FIXTURES,
    GOLDEN,
    REPLAY,
    corpus_manifest,
    corpus_program,
    fenced,
    gen_response,
    listing_symbols,
    make_instance,
)


class Budget:
    def __init__(self, seconds):
        self.seconds = seconds

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, *rest):
        elapsed = time.perf_counter() - self.start
        if exc_type is None:
            assert elapsed < self.seconds, f"took {elapsed:.2f}s, budget {self.seconds}s"


@pytest.mark.criterion(1)
def test_criterion_1_harmonic_mean_rows():
    tables = json.loads((FIXTURES / "per_task_accuracy.json").read_text())
    checked = 0
    with Budget(1.0):
        for model, table in tables.items():
            for method, per_task in table["per_task"].items():
                assert len(per_task) == 30
                got = harmonic_mean(list(per_task.values()), offset=0.01)
                published = table["harmonic_mean"][method]
                assert abs(got - published) <= 0.001 + 1e-12, (model, method, got, published)
                checked += 1
    assert checked == 10


@pytest.mark.criterion(2)
def test_criterion_2_reference_programs():
    cases = [("b1_listing.py", AnswerKind.INTEGER, 1), ("b2_listing.py", AnswerKind.FREE_TEXT, "brown")]
    with Budget(5.0):
        for name, kind, expected in cases:
            program = corpus_program(name)
            run = execute(program, listing_symbols(name))
            assert run.status is RunStatus.OK and run.return_value == expected
            issues = analyze(program, run, AnswerSpec(kind))
            assert is_well_formed(issues, run) and is_non_trivial(issues, run)


@pytest.mark.criterion(3)
def test_criterion_3_analyzer_corpus():
    manifest = corpus_manifest()
    assert len(manifest) == 20
    categories = {e["category"] for e in manifest.values()}
    assert {"trivial", "type", "syntax", "placeholder"} <= categories
    disagreements = []
    false_trivial = []
    with Budget(10.0):
        for name, entry in manifest.items():
            program = corpus_program(name)
            spec = AnswerSpec(AnswerKind(entry["answer_kind"]))
            run = execute(program, SymbolStore(entry["symbols"])) if entry["category"] != "syntax" else None
            issues = analyze(program, run, spec)
            if issues.flags() != entry["expected"] or issues.category != entry["category"]:
                disagreements.append(name)
            if detect_trivial(program) and not entry["expected"]["trivial"]:
                false_trivial.append(name)
    assert disagreements == [] and false_trivial == []


@pytest.mark.criterion(4)
def test_criterion_4_loop_control_flow():
    symbols = {"apples": [1, 2, 3]}
    trivial = "def solve(symbols):\n    return 3\n"
    fixed = "def solve(symbols):\n    return len(symbols['apples'])\n"

    def provider(refine):
        return ScriptedProvider({"generate": [gen_response(symbols, trivial)], "refine": refine,
                                 "judge": ["No issues."] * 20})

    with Budget(5.0):
        # (a) FINISHED on the second refinement
        a = run_loop(make_instance(), LoopConfig(30), provider([fenced("python", fixed), "FINISHED"]), Sandbox())
        assert a.refinements == 2 and a.final_answer.value == 3
        assert a.trace[-1].program.source.strip() == fixed.strip()

        # (b) never FINISHED, k = 5
        sb = Sandbox()
        b = run_loop(make_instance(), LoopConfig(5), provider([fenced("python", fixed)] * 10), sb)
        assert b.refinements == 5 and b.trace[-1].action is Action.EXHAUSTED
        assert b.final_answer.value == b.trace[-1].run.return_value == 3

        # (c) no symbol issues means symbols never change
        for result in (a, b):
            assert all(not t.feedback.symbol_issues for t in result.trace)
            assert len({t.symbols.canonical_bytes for t in result.trace}) == 1


def _separable(n, seed):
    rng = np.random.default_rng(seed)
    X = rng.random((n, 10))
    X = X[np.abs(X[:, 9] - 0.5) > 0.02]
    return [(CriteriaVector(tuple(x.tolist())), bool(x[9] > 0.5)) for x in X]


@pytest.mark.criterion(5)
def test_criterion_5_switch_suite():
    with Budget(30.0):
        samples = _separable(400, 0)
        assert accuracy(train_switch(samples), samples) >= 0.99

        a = train_switch(samples)
        b = train_switch([(v, not y) for v, y in samples])
        assert np.allclose(a.weights, [-w for w in b.weights], atol=1e-6) and abs(a.bias + b.bias) <= 1e-6

        xs, ys = [0.2, 0.4, 0.6, 0.8], [False, True, False, True]
        model = train_switch([(CriteriaVector((0.0,) * 9 + (x,)), y) for x, y in zip(xs, ys)])
        grid = np.arange(-5, 5.0001, 0.01)
        W, B = np.meshgrid(grid, grid, indexing="ij")
        loss = sum(np.logaddexp(0, -(W * x + B)) if y else np.logaddexp(0, W * x + B) for x, y in zip(xs, ys))
        loss = loss / 4 + 0.5 * 1e-4 * W**2
        i, j = np.unravel_index(np.argmin(loss), loss.shape)
        assert abs(model.weights[9] - W[i, j]) <= 0.02 and abs(model.bias - B[i, j]) <= 0.02

        rng = np.random.default_rng(0)
        p = rng.random(10_000)
        labels = rng.random(10_000) < p
        bins = calibration_curve(list(zip(p.tolist(), labels.tolist())), 10)
        assert max(abs(b.bin_mid - b.empirical_rate) for b in bins) < 0.05

        for row in np.random.default_rng(1).random((1000, 10)):
            expected = Decision.SYNTHESIS if row[9] >= 0.5 else Decision.COT
            assert zero_shot_decide(CriteriaVector(tuple(row.tolist()))) is expected

        for bits in itertools.product([False, True], repeat=10):
            assert rule_verdict(bits) is (sum(bits) >= 8)
            assert AlgoVerdict(bits, sum(bits) >= 8).consistent_with_rule


@pytest.mark.criterion(6)
def test_criterion_6_replay_determinism_and_resume(tmp_path, monkeypatch):
    connects = []

    def guard(self, *args):
        connects.append(args)
        raise OSError("network disabled during replay")

    monkeypatch.setattr(socket.socket, "connect", guard)
    cfg = bench_config(load_settings(REPLAY / "config.toml"))
    ds = load_dataset(REPLAY / "dataset.jsonl")
    assert len(ds.instances) == 10

    def replay(path, **kw):
        provider = CachedProvider(None, ReplayCache(REPLAY / "cache", "replay"))
        return run_benchmark([ds], "pips", cfg, provider, path, split="all", **kw)

    with Budget(30.0):
        first = replay(tmp_path / "a.jsonl")
        replay(tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
        assert all(r.error is None for r in first)

        replay(tmp_path / "c.jsonl", max_new=4)
        assert len(read_records(tmp_path / "c.jsonl")) == 4
        resumed = replay(tmp_path / "c.jsonl", resume=True)
        assert [r.to_dict() for r in resumed] == [r.to_dict() for r in first]
    assert connects == []


@pytest.mark.criterion(7)
def test_criterion_7_cost_accounting():
    with Budget(1.0):
        records = [RunRecord(f"p{i}", "t", "pot", usage=TokenUsage(1115 + (i < 96), 1333 + (i < 98)))
                   for i in range(100)]
        c = cost_report(records, PriceSheet(0.10, 0.40))["pot"]
        assert c.total_input_tokens == 111596 and c.total_output_tokens == 133398
        assert c.avg_input_tokens == 1115.96 and c.avg_output_tokens == 1333.98

        counts = st.integers(0, 10**9)
        prices = st.builds(PriceSheet, st.floats(0, 100), st.floats(0, 100))

        @settings(max_examples=200, deadline=None)
        @given(counts, counts, counts, counts, prices)
        def linear(i1, o1, i2, o2, sheet):
            total = estimate_cost(TokenUsage(i1 + i2, o1 + o2), sheet)
            parts = estimate_cost(TokenUsage(i1, o1), sheet) + estimate_cost(TokenUsage(i2, o2), sheet)
            assert math.isclose(total, parts, rel_tol=1e-12, abs_tol=1e-12)
            assert estimate_cost(TokenUsage(0, 0), sheet) == 0.0

        linear()


@pytest.mark.criterion(8)
def test_criterion_8_prompt_fidelity():
    question = "How many large objects are in front of the cyan object and behind the brown matte ball?"
    inst = make_instance(question)

    def golden(name):
        return (GOLDEN / name).read_text(encoding="utf-8")

    with Budget(1.0):
        assert generation_messages(inst)[0].text_content == golden("generate.txt")
        refine = render_refine(
            output="1", stdout="counting 5 objects\n", err="",
            checker_output="The code looks correct.\n\nAutomated checks:\n"
                           "- `solve` returns a hard-coded value that does not depend on `symbols`")
        assert refine == golden("refine.txt")
        judge = render_judge_prompt(SymbolStore({"objects": [{"color": "cyan", "x": 0.7}]}),
                                    ProgramArtifact("def solve(symbols):\n    return 1\n"),
                                    RunOutcome(RunStatus.OK, 1))
        assert judge == golden("judge.txt")
        for name in ("switch", "algorithmicity"):
            assert single_turn(inst, name)[0].text_content == golden(f"{name}.txt")
