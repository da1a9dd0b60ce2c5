"""Reference solvers: chain of thought, program of thought, and program of
thought with retries on execution failure."""

from __future__ import annotations

import re
import time
from dataclasses import dataclass, field

from .core import (
    Method,
    ProgramArtifact,
    ReasoningInstance,
    SolveResult,
    SymbolStore,
    TokenUsage,
    UnparseableAnswer,
    normalize_answer,
    parse_fenced_blocks,
)
from .evaluator import Feedback, analyze, is_non_trivial, is_well_formed
from .prompts import build_request, load_template, render, single_turn
from .provider import Message
from .sandbox import ExecLimits, RunStatus, default_sandbox
from .synthesis import Action, IterationTrace

_MARKER_RE = re.compile(r"FINAL ANSWER\s*:?", re.IGNORECASE)
_CODE_TAGS = {"python", "py", "python3", ""}


@dataclass(frozen=True)
class BaselineConfig:
    model_id: str = "mock"
    pot_max_retries: int = 3
    limits: ExecLimits = field(default_factory=ExecLimits)
    temperature: float = 0.0

    def __post_init__(self):
        if self.pot_max_retries < 1:
            raise ValueError("pot_max_retries must be >= 1")


def extract_final_answer(text: str) -> str | None:
    """Text after the last FINAL ANSWER marker, up to the end of that line."""
    matches = list(_MARKER_RE.finditer(text))
    if not matches:
        return None
    tail = text[matches[-1].end():].strip()
    line = tail.split("\n", 1)[0].strip().strip("*").strip()
    return line or None


def _normalize(raw, instance: ReasoningInstance):
    try:
        return normalize_answer(raw, instance.answer_spec)
    except (UnparseableAnswer, ValueError):
        return None


def cot_solve(instance: ReasoningInstance, cfg: BaselineConfig, provider) -> SolveResult:
    start = time.perf_counter()
    messages = single_turn(instance, "baseline/cot")
    response = provider.complete(build_request(cfg.model_id, messages, cfg.temperature))
    usage = response.usage
    warnings: list[str] = []
    answer = extract_final_answer(response.text)
    if answer is None:
        warnings.append("no FINAL ANSWER marker; re-prompted")
        retry = messages + [Message.text("assistant", response.text),
                            Message.text("user", load_template("baseline/cot_reprompt"))]
        second = provider.complete(build_request(cfg.model_id, retry, cfg.temperature))
        usage = usage + second.usage
        answer = extract_final_answer(second.text)
        if answer is None:
            lines = [l for l in second.text.strip().splitlines() if l.strip()]
            answer = lines[-1].strip() if lines else ""
            warnings.append("still no FINAL ANSWER marker; used the last line of the response")
    return SolveResult(Method.COT, final_answer=_normalize(answer, instance), usage=usage,
                       wall_seconds=time.perf_counter() - start, warnings=warnings)


def last_code_block(text: str) -> ProgramArtifact | None:
    program = None
    for tag, body in parse_fenced_blocks(text):
        tag = tag.lower().split()[0] if tag.strip() else ""
        if tag in _CODE_TAGS and body.strip():
            program = ProgramArtifact(body, takes_symbols=False)
    return program


_EMPTY_SYMBOLS = SymbolStore({})


def _attempt(instance, cfg, provider, sandbox, messages, index, warnings):
    response = provider.complete(build_request(cfg.model_id, messages, cfg.temperature))
    program = last_code_block(response.text)
    if program is None:
        return response, None, None
    run = sandbox.execute(program, _EMPTY_SYMBOLS, cfg.limits)
    issues = analyze(program, run, instance.answer_spec)
    trace = IterationTrace(index, _EMPTY_SYMBOLS, program, run, Feedback(issues, run),
                           Action.INITIAL if index == 0 else Action.REVISED_PROGRAM, response.usage,
                           response.text, list(warnings))
    return response, program, trace


def _pot(instance: ReasoningInstance, cfg: BaselineConfig, provider, sandbox, max_attempts: int,
         method: Method) -> SolveResult:
    start = time.perf_counter()
    sandbox = sandbox or default_sandbox()
    messages = single_turn(instance, "baseline/pot")
    usage = TokenUsage()
    result = SolveResult(method)
    for index in range(max_attempts):
        response, program, trace = _attempt(instance, cfg, provider, sandbox, messages, index, [])
        usage = usage + response.usage
        if trace is None:
            result.warnings.append(f"attempt {index + 1}: response contained no code block")
            err = "The response did not contain a Python code block."
        else:
            result.trace.append(trace)
            if trace.run.status is RunStatus.OK:
                break
            err = trace.run.exception_text or trace.run.status.value
        messages = messages + [Message.text("assistant", response.text),
                               Message.text("user", render(load_template("baseline/pot_retry"), err=err))]
    result.usage = usage
    result.wall_seconds = time.perf_counter() - start
    if result.trace:
        last = result.trace[-1]
        result.attempted_code = True
        result.final_issues = last.feedback.issues
        result.well_formed = is_well_formed(last.feedback.issues, last.run)
        result.non_trivial = is_non_trivial(last.feedback.issues, last.run)
        if last.run.ok and last.run.return_value is not None:
            result.final_answer = _normalize(last.run.return_value, instance)
    return result


def pot_solve(instance: ReasoningInstance, cfg: BaselineConfig, provider, sandbox=None) -> SolveResult:
    return _pot(instance, cfg, provider, sandbox, 1, Method.POT)


def pot_retries_solve(instance: ReasoningInstance, cfg: BaselineConfig, provider, sandbox=None) -> SolveResult:
    """Regenerate, showing the model its error, until a run succeeds or the attempt bound is hit."""
    return _pot(instance, cfg, provider, sandbox, cfg.pot_max_retries, Method.POT_RETRIES)
