"""The per-instance synthesis loop.

Generate symbols and a program, then repeatedly execute, evaluate and ask
the model to refine until it answers FINISHED or the iteration budget runs
out, in which case the last program is used.
"""

from __future__ import annotations

import json
import re
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

from .core import (
    InstsynthError,
    Method,
    ProgramArtifact,
    ReasoningInstance,
    SolveResult,
    SymbolStore,
    TokenUsage,
    UnparseableAnswer,
    normalize_answer,
    parse_fenced_blocks,
    total_usage,
)
from .evaluator import Feedback, analyze, is_non_trivial, is_well_formed, judge, run_slots
from .prompts import build_request, generation_messages, load_template, render_refine
from .provider import Message
from .sandbox import ExecLimits, RunOutcome, default_sandbox

_CODE_TAGS = {"python", "py", "python3"}
_FINISHED_RE = re.compile(r"(?<![A-Za-z_])FINISHED(?![A-Za-z_])")


class MissingBlock(InstsynthError):
    pass


class SynthesisAborted(InstsynthError):
    """A provider or sandbox failure stopped the loop; ``partial`` holds the traces so far."""

    def __init__(self, message: str, partial: SolveResult):
        super().__init__(message)
        self.partial = partial


class Action(str, Enum):
    INITIAL = "initial"
    REVISED_PROGRAM = "revised_program"
    REVISED_SYMBOLS = "revised_symbols"
    REVISED_BOTH = "revised_both"
    FINISHED = "finished"
    EXHAUSTED = "exhausted"

    @classmethod
    def refinement_actions(cls) -> frozenset["Action"]:
        return frozenset({cls.REVISED_PROGRAM, cls.REVISED_SYMBOLS, cls.REVISED_BOTH, cls.FINISHED})


@dataclass(frozen=True)
class LoopConfig:
    max_iterations: int = 30
    limits: ExecLimits = field(default_factory=ExecLimits)
    model_id: str = "mock"
    temperature: float = 0.0

    def __post_init__(self):
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")


@dataclass
class IterationTrace:
    index: int
    symbols: SymbolStore
    program: ProgramArtifact
    run: RunOutcome
    feedback: Feedback
    action: Action
    usage: TokenUsage = field(default_factory=TokenUsage)
    response_text: str = ""
    warnings: list[str] = field(default_factory=list)

    def to_dict(self, timing: bool = True) -> dict:
        return {
            "index": self.index,
            "symbols": self.symbols.root,
            "program": self.program.source,
            "run": self.run.to_dict(timing),
            "feedback": self.feedback.to_dict(timing),
            "action": self.action.value,
            "usage": self.usage.to_dict(),
            "warnings": list(self.warnings),
        }


@dataclass
class Extracted:
    symbols: SymbolStore | None
    program: ProgramArtifact | None


def extract_blocks(text: str) -> Extracted:
    """Last JSON block and last Python block of a response.

    Untagged blocks count as JSON when they parse as JSON, otherwise as code.
    """
    symbols = program = None
    for tag, body in parse_fenced_blocks(text):
        tag = tag.lower().split()[0] if tag.strip() else ""
        if tag == "json" or tag == "":
            try:
                symbols = SymbolStore(json.loads(body))
                continue
            except (json.JSONDecodeError, ValueError, TypeError):
                if tag == "json":
                    continue
        if tag in _CODE_TAGS or tag == "":
            if body.strip():
                program = ProgramArtifact(body)
    return Extracted(symbols, program)


def is_finished(text: str) -> bool:
    """True when the response says FINISHED, bare or fenced, and carries no other block content."""
    blocks = parse_fenced_blocks(text)
    if any(not _FINISHED_RE.fullmatch(body.strip()) for _, body in blocks if body.strip()):
        return False
    if any(body.strip() for _, body in blocks):
        return True
    return bool(_FINISHED_RE.search(text))


def _final_answer(run: RunOutcome, spec) -> Any:
    if not run.ok or run.return_value is None:
        return None
    try:
        return normalize_answer(run.return_value, spec)
    except (UnparseableAnswer, ValueError):
        return None


class SynthesisLoop:
    """One solve: owns the conversation and the trace."""

    def __init__(self, instance: ReasoningInstance, cfg: LoopConfig, provider, sandbox=None):
        self.instance = instance
        self.cfg = cfg
        self.provider = provider
        self.sandbox = sandbox or default_sandbox()
        self.messages: list[Message] = generation_messages(instance)
        self.trace: list[IterationTrace] = []
        self.warnings: list[str] = []
        self._pending_usage = TokenUsage()

    def _call(self, messages: list[Message]) -> str:
        response = self.provider.complete(build_request(self.cfg.model_id, messages, self.cfg.temperature))
        self._pending_usage = self._pending_usage + response.usage
        return response.text

    def _take_usage(self) -> TokenUsage:
        usage, self._pending_usage = self._pending_usage, TokenUsage()
        return usage

    def generate_initial(self) -> tuple[SymbolStore, ProgramArtifact]:
        text = self._call(self.messages)
        found = extract_blocks(text)
        if found.symbols is None or found.program is None:
            retry = self.messages + [Message.text("assistant", text),
                                     Message.text("user", load_template("baseline/missing_blocks"))]
            text = self._call(retry)
            found = extract_blocks(text)
            if found.symbols is None or found.program is None:
                missing = [n for n, v in (("JSON", found.symbols), ("Python", found.program)) if v is None]
                raise MissingBlock(f"response lacks a {' and a '.join(missing)} block after a re-prompt")
        self.messages.append(Message.text("assistant", text))
        self._response = text
        return found.symbols, found.program

    def evaluate(self, symbols: SymbolStore, program: ProgramArtifact, with_judge: bool) -> Feedback:
        run = self.sandbox.execute(program, symbols, self.cfg.limits)
        issues = analyze(program, run, self.instance.answer_spec)
        fb = Feedback(issues, run)
        if with_judge:
            verdict = judge(self.instance, symbols, program, run, self.provider, self.cfg.model_id,
                            self.cfg.temperature)
            self._pending_usage = self._pending_usage + verdict.usage
            fb.judge_summary = verdict.summary
            fb.symbol_issues = verdict.symbol_issues
            fb.program_issues = verdict.program_issues
        return fb

    def refine_step(self, feedback: Feedback) -> tuple[Action, Extracted, list[str]]:
        prompt = render_refine(checker_output=feedback.checker_output(), **run_slots(feedback.run))
        convo = self.messages + [Message.text("user", prompt)]
        text = self._call(convo)
        warnings: list[str] = []
        found = extract_blocks(text)
        if found.symbols is None and found.program is None and not is_finished(text):
            retry = convo + [Message.text("assistant", text),
                             Message.text("user", load_template("baseline/refine_reprompt"))]
            text = self._call(retry)
            found = extract_blocks(text)
            if found.symbols is None and found.program is None and not is_finished(text):
                warnings.append("refinement response had neither FINISHED nor code blocks; treated as finished")
        self.messages = convo + [Message.text("assistant", text)]
        self._response = text
        if found.symbols is not None and found.program is not None:
            action = Action.REVISED_BOTH
        elif found.program is not None:
            action = Action.REVISED_PROGRAM
        elif found.symbols is not None:
            action = Action.REVISED_SYMBOLS
        else:
            action = Action.FINISHED
        return action, found, warnings

    def result(self, start: float) -> SolveResult:
        res = SolveResult(Method.SYNTHESIS, trace=self.trace, warnings=list(self.warnings))
        res.usage = total_usage(t.usage for t in self.trace) + self._pending_usage
        res.wall_seconds = time.perf_counter() - start
        if self.trace:
            last = self.trace[-1]
            res.attempted_code = True
            res.final_answer = _final_answer(last.run, self.instance.answer_spec)
            res.final_issues = last.feedback.issues
            res.well_formed = is_well_formed(last.feedback.issues, last.run)
            res.non_trivial = is_non_trivial(last.feedback.issues, last.run)
        return res

    def run(self) -> SolveResult:
        start = time.perf_counter()
        try:
            try:
                symbols, program = self.generate_initial()
            except MissingBlock as e:
                self.warnings.append(str(e))
                return self.result(start)
            for i in range(self.cfg.max_iterations):
                response = self._response
                feedback = self.evaluate(symbols, program, with_judge=True)
                action, found, warnings = self.refine_step(feedback)
                self.trace.append(IterationTrace(i, symbols, program, feedback.run, feedback, action,
                                                 self._take_usage(), response, warnings))
                self.warnings.extend(warnings)
                if action is Action.FINISHED:
                    return self.result(start)
                symbols = found.symbols or symbols
                program = found.program or program
            response = self._response
            feedback = self.evaluate(symbols, program, with_judge=False)
            final_action = Action.EXHAUSTED if self.cfg.max_iterations > 0 else Action.INITIAL
            self.trace.append(IterationTrace(len(self.trace), symbols, program, feedback.run, feedback,
                                             final_action, self._take_usage(), response))
            return self.result(start)
        except MissingBlock:
            raise
        except InstsynthError as e:
            raise SynthesisAborted(f"synthesis aborted: {e}", self.result(start)) from e


def run_loop(instance: ReasoningInstance, cfg: LoopConfig, provider, sandbox=None) -> SolveResult:
    return SynthesisLoop(instance, cfg, provider, sandbox).run()
