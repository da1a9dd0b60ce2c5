"""Shared helpers for the test suite."""

from __future__ import annotations

import ast
import json
from pathlib import Path

from instsynth.core import AnswerKind, AnswerSpec, ProgramArtifact, ReasoningInstance, SymbolStore, normalize_answer
from instsynth.provider import ScriptedProvider, request_text

FIXTURES = Path(__file__).parent / "fixtures"
CORPUS = FIXTURES / "corpus"
GOLDEN = FIXTURES / "golden"


def corpus_manifest() -> dict:
    return json.loads((CORPUS / "manifest.json").read_text(encoding="utf-8"))


def corpus_program(name: str) -> ProgramArtifact:
    return ProgramArtifact((CORPUS / name).read_text(encoding="utf-8"))


def listing_symbols(name: str) -> SymbolStore:
    """The symbols literal printed at the top of a reference listing."""
    tree = ast.parse((CORPUS / name).read_text(encoding="utf-8"))
    return SymbolStore(ast.literal_eval(tree.body[0].value))


def make_instance(query="How many apples are there?", kind="integer", gold=None, options=(), id="q1", task="toy"):
    spec = AnswerSpec(AnswerKind(kind), tuple(options))
    gold_value = None if gold is None else normalize_answer(gold, spec)
    return ReasoningInstance(id, task, query, spec, gold_value)


def fenced(tag: str, body: str) -> str:
    return f"```{tag}\n{body}\n```"


def gen_response(symbols: dict, code: str) -> str:
    return "Plan.\n" + fenced("json", json.dumps(symbols)) + "\n" + fenced("python", code)


def by_question(table: dict) -> ScriptedProvider:
    """Scripted provider that answers by (prompt kind, question) so concurrent runs stay deterministic.

    ``table`` maps question text to {kind: response or list of responses}; list
    entries are picked by conversation position (the n-th refinement request
    gets entry n, a re-prompt gets the next entry), repeating the last entry.
    """
    from instsynth.prompts import classify_request

    def respond(req):
        kind = classify_request(req)
        text = request_text(req)
        for question, kinds in table.items():
            if question in text:
                reply = kinds[kind]
                if isinstance(reply, list):
                    turns = sum(1 for m in req.messages if m.role == "assistant")
                    if kind == "refine":
                        turns -= 1
                    return reply[min(turns, len(reply) - 1)]
                return reply
        raise KeyError(f"no scripted answer for {kind} request")

    return ScriptedProvider(respond)


REPLAY = FIXTURES / "replay"
_HIGH = "The question is a counting task.\nFINAL ANSWER: [0.9,0.8,0.9,0.7,0.6,0.9,0.8,0.7,0.9,0.9]"
_LOW = "This is recall of a fact.\nFINAL ANSWER: [0.2,0.1,0.3,0.2,0.1,0.4,0.2,0.1,0.3,0.1]"


def fixture_script(dataset) -> ScriptedProvider:
    """Content-keyed responses for the replay fixture dataset.

    Counting questions route to synthesis, start from a hard-coded program and
    get fixed on the first refinement; trivia questions route to CoT. A few
    baseline answers are wrong on purpose so methods differ.
    """
    table = {}
    for n, inst in enumerate(dataset.instances):
        gold = inst.gold_answer.value
        if inst.task_name == "counting":
            fruits = inst.query_text.split(": ", 1)[1].rstrip("?").split(", ")
            trivial = f"def solve(symbols):\n    return {len(fruits)}\n"
            fixed = "def solve(symbols):\n    return len(symbols['fruits'])\n"
            table[inst.query_text] = {
                "switch": _HIGH,
                "generate": gen_response({"fruits": fruits}, trivial),
                "judge": "No issues found in the symbols.",
                "refine": [fenced("python", fixed), "FINISHED"],
                "cot": f"Counting the list.\nFINAL ANSWER: {gold + (n % 2)}",
                "pot": [fenced("python", "def solve():\n    return len(basket)"),
                        fenced("python", f"def solve():\n    return {gold}")],
            }
        else:
            wrong = n % 3 == 0
            table[inst.query_text] = {
                "switch": _LOW,
                "cot": f"Recalling.\nFINAL ANSWER: {'unknown' if wrong else gold}",
                "pot": fenced("python", f"def solve():\n    return {gold!r}"),
            }
    return by_question(table)
