import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from instsynth.core import Method, TokenUsage
from instsynth.provider import ScriptedProvider, approx_tokens, request_text
from instsynth.sandbox import RunOutcome, RunStatus
from instsynth.synthesis import (
    Action,
    LoopConfig,
    MissingBlock,
    SynthesisAborted,
    SynthesisLoop,
    extract_blocks,
    is_finished,
    run_loop,
)
from support import fenced, gen_response, make_instance

SYMBOLS = {"apples": [1, 2, 3]}
TRIVIAL = "def solve(symbols):\n    return 3\n"
FIXED = "def solve(symbols):\n    return len(symbols['apples'])\n"
CFG = LoopConfig(max_iterations=30)


class FakeSandbox:
    """Runs nothing; returns the integer after `return` in the program."""

    def __init__(self):
        self.calls = 0

    def execute(self, program, symbols, limits):
        self.calls += 1
        if "len(symbols" in program.source:
            return RunOutcome(RunStatus.OK, len(symbols.root["apples"]))
        tail = program.source.rsplit("return", 1)[-1].strip()
        return RunOutcome(RunStatus.OK, int(tail) if tail.isdigit() else None)


def provider(gen, refine, judge="No issues."):
    return ScriptedProvider({"generate": gen if isinstance(gen, list) else [gen],
                             "refine": refine, "judge": [judge] * 50})


def test_extract_blocks_last_wins():
    text = "\n".join([fenced("json", '{"a": 1}'), fenced("json", '{"a": 2}'), fenced("python", "x = 1"),
                      fenced("py", "y = 2")])
    found = extract_blocks(text)
    assert found.symbols.root == {"a": 2} and found.program.source == "y = 2"


def test_extract_blocks_untagged():
    found = extract_blocks(fenced("", '{"a": 1}') + "\n" + fenced("", "def solve(s):\n    return 1"))
    assert found.symbols.root == {"a": 1} and found.program.source.startswith("def solve")


def test_is_finished_forms():
    assert is_finished("FINISHED")
    assert is_finished("  ```\nFINISHED\n```\n")
    assert is_finished("Everything checks out.\n\nFINISHED")
    assert not is_finished("Not done yet")
    assert not is_finished(fenced("python", "x = 1") + "\nFINISHED")


def test_generate_initial_parses_both_blocks():
    loop = SynthesisLoop(make_instance(), CFG, provider(gen_response(SYMBOLS, FIXED), []), FakeSandbox())
    symbols, program = loop.generate_initial()
    assert symbols.root == SYMBOLS and program.source.strip() == FIXED.strip()


def test_generate_initial_reprompts_then_fails():
    p = provider(["no blocks here", "still nothing"], [])
    loop = SynthesisLoop(make_instance(), CFG, p, FakeSandbox())
    with pytest.raises(MissingBlock):
        loop.generate_initial()
    assert len(p.calls) == 2


def test_generate_initial_reprompt_succeeds():
    p = provider(["only prose", gen_response(SYMBOLS, FIXED)], ["FINISHED"])
    result = run_loop(make_instance(), CFG, p, FakeSandbox())
    assert result.final_answer.value == 3


def test_trivial_then_fixed_then_finished():
    sb = FakeSandbox()
    p = provider(gen_response(SYMBOLS, TRIVIAL), [fenced("python", FIXED), "FINISHED"])
    result = run_loop(make_instance(), CFG, p, sb)
    assert result.refinements == 2
    assert [t.action for t in result.trace] == [Action.REVISED_PROGRAM, Action.FINISHED]
    assert result.trace[0].feedback.issues.trivial
    assert result.non_trivial and result.well_formed
    assert result.final_answer.value == 3
    assert result.method is Method.SYNTHESIS


def test_never_finishing_is_bounded():
    sb = FakeSandbox()
    p = provider(gen_response(SYMBOLS, TRIVIAL), [fenced("python", FIXED)] * 10)
    result = run_loop(make_instance(), LoopConfig(max_iterations=5), p, sb)
    assert result.refinements == 5
    assert result.trace[-1].action is Action.EXHAUSTED
    assert len(result.trace) == 6 and sb.calls == 6
    assert result.final_answer.value == 3


def test_zero_iterations_runs_initial_program():
    p = provider(gen_response(SYMBOLS, TRIVIAL), [])
    result = run_loop(make_instance(), LoopConfig(max_iterations=0), p, FakeSandbox())
    assert [t.action for t in result.trace] == [Action.INITIAL]
    assert result.refinements == 0 and result.final_answer.value == 3


def test_symbols_stable_without_symbol_revisions():
    p = provider(gen_response(SYMBOLS, TRIVIAL), [fenced("python", TRIVIAL)] * 4)
    result = run_loop(make_instance(), LoopConfig(max_iterations=4), p, FakeSandbox())
    first = result.trace[0].symbols.canonical_bytes
    assert all(t.symbols.canonical_bytes == first for t in result.trace)


def test_revised_symbols_and_both():
    new = {"apples": [1, 2, 3, 4]}
    p = provider(gen_response(SYMBOLS, FIXED), [fenced("json", '{"apples": [1]}'), gen_response(new, FIXED), "FINISHED"])
    result = run_loop(make_instance(), CFG, p, FakeSandbox())
    assert [t.action for t in result.trace] == [Action.REVISED_SYMBOLS, Action.REVISED_BOTH, Action.FINISHED]
    assert result.trace[1].symbols.root == {"apples": [1]}
    assert result.trace[2].symbols.root == new
    assert result.final_answer.value == 4


def test_unparseable_refinement_degrades_to_finished():
    p = provider(gen_response(SYMBOLS, FIXED), ["hmm", "I am not sure"])
    result = run_loop(make_instance(), CFG, p, FakeSandbox())
    assert result.trace[-1].action is Action.FINISHED
    assert any("treated as finished" in w for w in result.warnings)


def test_usage_sums_every_call():
    p = provider(gen_response(SYMBOLS, TRIVIAL), [fenced("python", FIXED), "FINISHED"])
    result = run_loop(make_instance(), CFG, p, FakeSandbox())
    assert len(p.calls) == 5  # generate, judge, refine, judge, refine
    expected_in = sum(approx_tokens(request_text(r)) for r in p.calls)
    assert result.usage.input_tokens == expected_in
    assert result.usage == sum((t.usage for t in result.trace), TokenUsage())


def test_refine_prompt_carries_run_and_checker_output():
    p = provider(gen_response(SYMBOLS, TRIVIAL), ["FINISHED"], judge="Issues with the code:\n- returns a constant")
    run_loop(make_instance(), CFG, p, FakeSandbox())
    refine_request = p.calls[-1]
    last_user = refine_request.messages[-1].text_content
    assert "Return value: 3" in last_user
    assert "returns a constant" in last_user and "hard-coded" in last_user
    assert [m.role for m in refine_request.messages] == ["system", "user", "assistant", "user"]


def test_provider_failure_aborts_with_partial_trace():
    p = provider(gen_response(SYMBOLS, TRIVIAL), [fenced("python", FIXED)])  # runs out on 2nd refine
    with pytest.raises(SynthesisAborted) as err:
        run_loop(make_instance(), CFG, p, FakeSandbox())
    assert len(err.value.partial.trace) == 1


def test_final_answer_absent_when_fallback_fails():
    bad = "def solve(symbols):\n    return None\n"
    p = provider(gen_response(SYMBOLS, bad), [fenced("python", bad)])
    result = run_loop(make_instance(), LoopConfig(max_iterations=1), p, FakeSandbox())
    assert result.final_answer is None and not result.well_formed


responses = st.lists(st.sampled_from(["FINISHED", "python", "json", "both", "junk"]), max_size=8)


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(responses, st.integers(0, 6))
def test_loop_invariants(script, k):
    texts = {"FINISHED": "FINISHED", "python": fenced("python", FIXED), "json": fenced("json", '{"apples": [9]}'),
             "both": gen_response({"apples": [7, 7]}, FIXED), "junk": "no idea"}
    refine = [texts[s] for s in script] + ["FINISHED"] * 20
    p = provider(gen_response(SYMBOLS, TRIVIAL), refine)
    sb = FakeSandbox()
    result = run_loop(make_instance(), LoopConfig(max_iterations=k), p, sb)
    assert result.refinements <= k
    assert [t.index for t in result.trace] == list(range(len(result.trace)))
    assert sum(t.action is Action.FINISHED for t in result.trace) <= 1
    assert sb.calls == len(result.trace)
    finished = [t for t in result.trace if t.action is Action.FINISHED]
    if finished:
        assert result.final_answer.value == finished[0].run.return_value
    for a, b in zip(result.trace, result.trace[1:]):
        if a.symbols != b.symbols:
            assert a.feedback.symbol_issues or a.action in (Action.REVISED_SYMBOLS, Action.REVISED_BOTH)
