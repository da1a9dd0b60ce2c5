"""Shared domain types, answer normalization, fenced-block parsing and
aggregate statistics.

Everything here is pure and safe to call from many threads.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import TYPE_CHECKING, Any, Iterable, Sequence

if TYPE_CHECKING:
    from .evaluator import IssueSet
    from .synthesis import IterationTrace


class InstsynthError(Exception):
    """Base class for errors raised by this package."""


class UnparseableAnswer(InstsynthError, ValueError):
    pass


class EmptyInput(InstsynthError, ValueError):
    pass


class SchemaError(InstsynthError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DegenerateData(InstsynthError, ValueError):
    pass


class AnswerKind(str, Enum):
    FREE_TEXT = "free_text"
    INTEGER = "integer"
    DECIMAL = "decimal"
    MULTIPLE_CHOICE = "multiple_choice"
    BOOLEAN = "boolean"


class SplitTag(str, Enum):
    CALIBRATION = "calibration"
    EVALUATION = "evaluation"
    UNASSIGNED = "unassigned"


NUMERIC_KINDS = (AnswerKind.INTEGER, AnswerKind.DECIMAL)

_OPTION_RE = re.compile(r"^\(?([a-z0-9]{1,3})[\).:]\s*(.*)$", re.IGNORECASE | re.DOTALL)


@dataclass(frozen=True)
class AnswerSpec:
    kind: AnswerKind = AnswerKind.FREE_TEXT
    options: tuple[str, ...] | None = None
    numeric_rel_tol: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "kind", AnswerKind(self.kind))
        if self.options is not None:
            object.__setattr__(self, "options", tuple(self.options))
        if self.kind is AnswerKind.MULTIPLE_CHOICE:
            if not self.options or len(set(self.options)) < 2:
                raise ValueError("multiple_choice needs at least 2 distinct options")
        elif self.options:
            raise ValueError("options are only valid for multiple_choice")
        if not self.numeric_rel_tol >= 0:
            raise ValueError("numeric_rel_tol must be >= 0")

    def option_table(self) -> list[tuple[str, str]]:
        """(label, text) pairs, both normalized. Bare options are their own label."""
        table = []
        for opt in self.options or ():
            m = _OPTION_RE.match(opt.strip())
            if m and m.group(2).strip():
                table.append((_clean_text(m.group(1)), _clean_text(m.group(2))))
            else:
                label = _clean_text(opt)
                table.append((label, label))
        return table

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"kind": self.kind.value}
        if self.options is not None:
            d["options"] = list(self.options)
        if self.numeric_rel_tol != 1e-6:
            d["numeric_rel_tol"] = self.numeric_rel_tol
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AnswerSpec":
        return cls(
            kind=AnswerKind(d.get("kind", "free_text")),
            options=tuple(d["options"]) if d.get("options") is not None else None,
            numeric_rel_tol=float(d.get("numeric_rel_tol", 1e-6)),
        )


@dataclass(frozen=True)
class AnswerValue:
    """A normalized answer. ``canonical_text`` depends only on ``value`` and the spec."""

    value: str | int | float | bool
    canonical_text: str
    kind: AnswerKind = AnswerKind.FREE_TEXT

    def to_dict(self) -> dict:
        return {"value": self.value, "canonical_text": self.canonical_text, "kind": self.kind.value}

    @classmethod
    def from_dict(cls, d: dict) -> "AnswerValue":
        return cls(d["value"], d["canonical_text"], AnswerKind(d.get("kind", "free_text")))


@dataclass(frozen=True)
class MediaRef:
    path: Path
    kind: str = "image/png"

    def read_bytes(self) -> bytes:
        return Path(self.path).read_bytes()


@dataclass
class ReasoningInstance:
    id: str
    task_name: str
    query_text: str
    answer_spec: AnswerSpec = field(default_factory=AnswerSpec)
    gold_answer: AnswerValue | None = None
    attachments: list[MediaRef] = field(default_factory=list)
    split_tag: SplitTag = SplitTag.UNASSIGNED


def canonical_json(value: Any) -> bytes:
    """Sorted keys, no insignificant whitespace, minimal escaping, UTF-8."""
    return json.dumps(
        value, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
    ).encode("utf-8")


@dataclass(frozen=True)
class SymbolStore:
    """Structured program input: a JSON tree with a canonical byte form."""

    root: Any = None

    def __post_init__(self):
        # validates that root is a finite JSON tree
        canonical_json(self.root)

    @property
    def canonical_bytes(self) -> bytes:
        return canonical_json(self.root)

    @classmethod
    def from_bytes(cls, data: bytes | str) -> "SymbolStore":
        if isinstance(data, bytes):
            data = data.decode("utf-8")
        return cls(json.loads(data))

    def pretty(self) -> str:
        return json.dumps(self.root, indent=2, ensure_ascii=False)


@dataclass(frozen=True)
class TokenUsage:
    input_tokens: int = 0
    output_tokens: int = 0

    def __post_init__(self):
        if self.input_tokens < 0 or self.output_tokens < 0:
            raise ValueError("token counts must be non-negative")

    def __add__(self, other: "TokenUsage") -> "TokenUsage":
        return TokenUsage(
            self.input_tokens + other.input_tokens, self.output_tokens + other.output_tokens
        )

    def to_dict(self) -> dict:
        return {"input_tokens": self.input_tokens, "output_tokens": self.output_tokens}


def total_usage(usages: Iterable[TokenUsage]) -> TokenUsage:
    total = TokenUsage()
    for u in usages:
        total = total + u
    return total


@dataclass(frozen=True)
class ProgramArtifact:
    source: str
    entry_name: str = "solve"
    origin_iteration: int = 0
    # PoT programs take no input; their entry is called with no arguments.
    takes_symbols: bool = True

    def __post_init__(self):
        if not self.source or not self.source.strip():
            raise ValueError("program source must be non-empty")
        if self.origin_iteration < 0:
            raise ValueError("origin_iteration must be >= 0")


class Method(str, Enum):
    SYNTHESIS = "synthesis"
    COT = "cot"
    POT = "pot"
    POT_RETRIES = "pot_retries"


@dataclass
class SolveResult:
    method: Method
    final_answer: AnswerValue | None = None
    trace: list["IterationTrace"] = field(default_factory=list)
    usage: TokenUsage = field(default_factory=TokenUsage)
    cost_usd: float = 0.0
    well_formed: bool = False
    non_trivial: bool = False
    wall_seconds: float = 0.0
    final_issues: "IssueSet | None" = None
    attempted_code: bool = False
    warnings: list[str] = field(default_factory=list)

    @property
    def refinements(self) -> int:
        """Number of refinement calls made by the synthesis loop."""
        from .synthesis import Action

        return sum(1 for t in self.trace if t.action in Action.refinement_actions())


# ---------------------------------------------------------------------------
# answer normalization

_WRAPPERS = [("(", ")"), ("[", "]"), ('"', '"'), ("'", "'"), ("`", "`"), ("“", "”"), ("‘", "’")]
_NUMBER_RE = re.compile(r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:e[-+]?\d+)?(?:\s*/\s*\d+)?", re.IGNORECASE)
_TRUE = {"true", "yes", "1", "y", "t"}
_FALSE = {"false", "no", "0", "n", "f"}


def _balanced(inner: str, left: str, right: str) -> bool:
    if left == right:
        return left not in inner
    depth = 0
    for ch in inner:
        if ch == left:
            depth += 1
        elif ch == right:
            depth -= 1
            if depth < 0:
                return False
    return depth == 0


def _clean_text(text: str) -> str:
    # iterated to a fixpoint so that normalization is idempotent
    s = text
    while True:
        prev = s
        s = s.strip().casefold()
        if s.endswith("."):
            s = s[:-1]
        for left, right in _WRAPPERS:
            if len(s) >= 2 and s.startswith(left) and s.endswith(right) and _balanced(s[1:-1], left, right):
                s = s[1:-1]
                break
        if s == prev:
            return s


def _format_number(x: int | float) -> str:
    if isinstance(x, int):
        return str(x)
    return repr(x)


def _parse_number(text: str) -> int | float | None:
    s = text.replace(",", "").replace("$", "").replace("%", "")
    full = _NUMBER_RE.fullmatch(s.strip())
    matches = [full] if full else list(_NUMBER_RE.finditer(s))
    if not matches:
        return None
    token = matches[-1].group(0).replace(" ", "")
    try:
        if "/" in token:
            num, den = token.split("/")
            if int(den) == 0:
                return None
            return float(Fraction(num) / int(den))
        if re.fullmatch(r"[-+]?\d+", token):
            return int(token)
        return float(token)
    except (ValueError, ZeroDivisionError):
        return None


def normalize_answer(raw: Any, spec: AnswerSpec) -> AnswerValue:
    """Normalize a raw prediction or gold answer under ``spec``.

    Text is trimmed, casefolded, stripped of a trailing period and of wrapping
    parentheses or quotes (repeated until stable). Numeric kinds are parsed,
    multiple-choice option text maps to its label, and booleans accept
    true/false and yes/no spellings.
    """
    if isinstance(raw, AnswerValue):
        raw = raw.value
    if raw is None:
        if spec.kind in NUMERIC_KINDS:
            raise UnparseableAnswer("null answer for a numeric question")
        raw = "None"
    kind = spec.kind

    if kind in NUMERIC_KINDS:
        if isinstance(raw, bool):
            raise UnparseableAnswer(f"boolean {raw!r} is not a number")
        if isinstance(raw, (int, float)):
            num: int | float | None = raw
        else:
            num = _parse_number(_clean_text(str(raw)))
        if num is None or (isinstance(num, float) and not math.isfinite(num)):
            raise UnparseableAnswer(f"no number in {raw!r}")
        if kind is AnswerKind.INTEGER:
            if isinstance(num, float) and num.is_integer():
                num = int(num)
        else:
            num = float(num)
        return AnswerValue(num, _format_number(num), kind)

    if kind is AnswerKind.BOOLEAN:
        if isinstance(raw, bool):
            b = raw
        else:
            text = _clean_text(str(raw))
            if text in _TRUE:
                b = True
            elif text in _FALSE:
                b = False
            else:
                return AnswerValue(text, text, kind)
        return AnswerValue(b, "true" if b else "false", kind)

    if isinstance(raw, bool):
        text = "true" if raw else "false"
    elif isinstance(raw, float) and raw.is_integer():
        text = str(int(raw))
    else:
        text = _clean_text(str(raw))

    if kind is AnswerKind.MULTIPLE_CHOICE:
        table = spec.option_table()
        labels = {label for label, _ in table}
        if text in labels:
            return AnswerValue(text, text, kind)
        for label, opt_text in table:
            if text == opt_text:
                return AnswerValue(label, label, kind)
        m = _OPTION_RE.match(text)
        if m and _clean_text(m.group(1)) in labels:
            label = _clean_text(m.group(1))
            rest = _clean_text(m.group(2))
            if not rest or dict(table).get(label) == rest:
                return AnswerValue(label, label, kind)
        return AnswerValue(text, text, kind)

    return AnswerValue(text, text, kind)


def answers_match(predicted: AnswerValue, gold: AnswerValue, spec: AnswerSpec) -> bool:
    if predicted.kind != gold.kind:
        return False
    if spec.kind in NUMERIC_KINDS:
        a, b = predicted.value, gold.value
        if isinstance(a, bool) or isinstance(b, bool):
            return False
        if not isinstance(a, (int, float)) or not isinstance(b, (int, float)):
            return False
        tol = max(spec.numeric_rel_tol * max(abs(a), abs(b)), 1e-9)
        return abs(a - b) <= tol
    return predicted.canonical_text == gold.canonical_text


def option_index(value: AnswerValue, spec: AnswerSpec) -> int | None:
    labels = [label for label, _ in spec.option_table()]
    try:
        return labels.index(value.canonical_text)
    except ValueError:
        return None


# ---------------------------------------------------------------------------
# fenced blocks

_FENCE_OPEN = re.compile(r"^ {0,3}(`{3,})([^`]*)$")


def parse_fenced_blocks(text: str) -> list[tuple[str, str]]:
    """Return ``(info_tag, body)`` for every triple-backtick block, in order.

    An unterminated final fence runs to the end of the text.
    """
    blocks = []
    lines = text.split("\n")
    i = 0
    while i < len(lines):
        m = _FENCE_OPEN.match(lines[i])
        if not m:
            i += 1
            continue
        fence_len = len(m.group(1))
        tag = m.group(2).strip()
        body = []
        i += 1
        while i < len(lines):
            stripped = lines[i].strip()
            if len(stripped) >= fence_len and set(stripped) == {"`"}:
                break
            body.append(lines[i])
            i += 1
        blocks.append((tag, "\n".join(body)))
        i += 1
    return blocks


def render_fenced_blocks(blocks: Sequence[tuple[str, str]]) -> str:
    return "\n".join(f"```{tag}\n{body}\n```" for tag, body in blocks)


# ---------------------------------------------------------------------------
# statistics

def harmonic_mean(values: Sequence[float], offset: float = 0.0) -> float:
    """n / sum(1 / (v + offset)); zero whenever some shifted value is zero.

    ``offset=0.01`` (one percentage point added to every accuracy) is the
    convention behind published BBEH-style harmonic-mean tables.
    """
    values = list(values)
    if not values:
        raise EmptyInput("harmonic_mean of an empty list")
    for v in values:
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"value {v!r} outside [0, 1]")
    shifted = [v + offset for v in values]
    if any(s == 0 for s in shifted):
        return 0.0
    return len(shifted) / math.fsum(1.0 / s for s in shifted)
