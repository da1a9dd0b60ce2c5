"""Confidence switch between program synthesis and chain of thought.

The model rates ten criteria for a question; the resulting score vector is
routed either by the last criterion alone (zero-shot) or by a logistic
classifier trained on instances where exactly one method was correct.
Also holds the algorithmicity classifier and calibration analytics.
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit, log_expit

from .core import DegenerateData, EmptyInput, InstsynthError, ReasoningInstance, TokenUsage
from .prompts import build_request, load_template, single_turn
from .provider import Message

N_CRITERIA = 10
DEFAULT_L2 = 1e-4
DEFAULT_THRESHOLD = 0.5

# Published switch coefficients (per-criterion weights, no bias) used as an illustrative fixture.
PUBLISHED_WEIGHTS = {
    "gemini-2.0-flash": (0.14, 0.03, 0.12, 0.15, 0.21, -0.21, 0.18, -0.09, 0.03, 0.10),
    "gpt-4.1-mini": (0.40, 0.42, 0.20, 0.28, 0.22, 0.15, -0.02, 0.01, 0.21, 0.21),
    "o4-mini": (0.22, 0.04, 0.16, 0.24, 0.27, -0.05, 0.12, 0.35, 0.18, 0.24),
}


class Decision(str, Enum):
    SYNTHESIS = "synthesis"
    COT = "cot"


class UnclassifiedInstance(InstsynthError):
    pass


@dataclass(frozen=True)
class CriteriaVector:
    scores: tuple[float, ...]
    parse_warnings: tuple[str, ...] = ()

    def __post_init__(self):
        scores = tuple(float(s) for s in self.scores)
        if len(scores) != N_CRITERIA:
            raise ValueError(f"expected {N_CRITERIA} scores, got {len(scores)}")
        warnings = list(self.parse_warnings)
        clamped = []
        for i, s in enumerate(scores):
            if not math.isfinite(s):
                raise ValueError(f"score {i + 1} is not finite")
            c = min(1.0, max(0.0, s))
            if c != s:
                warnings.append(f"score {i + 1} = {s:g} clamped to {c:g}")
            clamped.append(c)
        object.__setattr__(self, "scores", tuple(clamped))
        object.__setattr__(self, "parse_warnings", tuple(warnings))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.scores, dtype=float)

    def to_dict(self) -> dict:
        return {"scores": list(self.scores), "parse_warnings": list(self.parse_warnings)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "CriteriaVector":
        # clamping already happened when the vector was first built
        return cls(tuple(d["scores"]), tuple(d.get("parse_warnings", ())))


# ---------------------------------------------------------------------------
# criteria scoring

_NUM_RE = re.compile(r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?")


def parse_criteria(text: str) -> list[float] | None:
    """Scores listed after the last FINAL ANSWER marker, or None if there are not exactly ten."""
    idx = text.upper().rfind("FINAL ANSWER")
    if idx < 0:
        return None
    tail = text[idx + len("FINAL ANSWER"):]
    bracket = re.search(r"\[([^\]]*)\]", tail)
    body = bracket.group(1) if bracket else tail.strip().split("\n\n")[0]
    nums = [float(m) for m in _NUM_RE.findall(body)]
    return nums if len(nums) == N_CRITERIA else None


@dataclass
class ScoredCriteria:
    vector: CriteriaVector
    usage: TokenUsage


def score_criteria(instance: ReasoningInstance, provider, model_id: str, temperature: float = 0.0,
                   max_reprompts: int = 2) -> ScoredCriteria:
    messages = single_turn(instance, "switch")
    usage = TokenUsage()
    warnings: list[str] = []
    for attempt in range(max_reprompts + 1):
        response = provider.complete(build_request(model_id, messages, temperature))
        usage = usage + response.usage
        scores = parse_criteria(response.text)
        if scores is not None:
            return ScoredCriteria(CriteriaVector(tuple(scores), tuple(warnings)), usage)
        warnings.append(f"criteria response {attempt + 1} did not end with a list of {N_CRITERIA} scores")
        messages = messages + [Message.text("assistant", response.text),
                               Message.text("user", load_template("baseline/criteria_reprompt"))]
    warnings.append("criteria defaulted to 0.5")
    return ScoredCriteria(CriteriaVector((0.5,) * N_CRITERIA, tuple(warnings)), usage)


def zero_shot_decide(v: CriteriaVector) -> Decision:
    return Decision.SYNTHESIS if v.scores[-1] >= 0.5 else Decision.COT


# ---------------------------------------------------------------------------
# logistic switch

def logit(p: float) -> float:
    if p <= 0.0:
        return -math.inf
    if p >= 1.0:
        return math.inf
    return math.log(p / (1.0 - p))


@dataclass(frozen=True)
class TrainingMeta:
    samples: int
    l2: float
    converged: bool
    steps: int = 0
    grad_norm: float = 0.0


@dataclass(frozen=True)
class LogisticModel:
    weights: tuple[float, ...]
    bias: float = 0.0
    threshold: float = DEFAULT_THRESHOLD
    training_meta: TrainingMeta | None = None

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        object.__setattr__(self, "weights", w)
        if not all(math.isfinite(x) for x in w) or not math.isfinite(self.bias):
            raise ValueError("model parameters must be finite")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must be in (0, 1)")

    def margin(self, v: CriteriaVector | Sequence[float]) -> float:
        p = v.scores if isinstance(v, CriteriaVector) else v
        if len(p) != len(self.weights):
            raise ValueError("score vector length does not match the model")
        return math.fsum(w * x for w, x in zip(self.weights, p)) + self.bias

    def probability(self, v: CriteriaVector | Sequence[float]) -> float:
        return float(expit(self.margin(v)))

    def to_dict(self) -> dict:
        meta = self.training_meta
        return {
            "weights": list(self.weights),
            "bias": self.bias,
            "threshold": self.threshold,
            "training_meta": None if meta is None else {
                "samples": meta.samples, "l2": meta.l2, "converged": meta.converged,
                "steps": meta.steps, "grad_norm": meta.grad_norm,
            },
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "LogisticModel":
        meta = d.get("training_meta")
        return cls(tuple(d["weights"]), float(d.get("bias", 0.0)), float(d.get("threshold", DEFAULT_THRESHOLD)),
                   TrainingMeta(**meta) if meta else None)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "LogisticModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def decide(model: LogisticModel, v: CriteriaVector) -> tuple[float, Decision]:
    """Probability that synthesis is the better route, and the routing decision.

    The comparison is done on the margin against logit(threshold), which
    equals ``probability >= threshold`` without rounding in the sigmoid.
    """
    z = model.margin(v)
    decision = Decision.SYNTHESIS if z >= logit(model.threshold) else Decision.COT
    return float(expit(z)), decision


def _objective(theta: np.ndarray, X: np.ndarray, y: np.ndarray, l2: float) -> float:
    z = X @ theta[:-1] + theta[-1]
    nll = -np.mean(y * log_expit(z) + (1 - y) * log_expit(-z))
    return float(nll + 0.5 * l2 * theta[:-1] @ theta[:-1])


def train_switch(samples: Sequence[tuple[CriteriaVector | Sequence[float], bool]], l2: float = DEFAULT_L2,
                 threshold: float = DEFAULT_THRESHOLD, tol: float = 1e-8, max_steps: int = 10_000) -> LogisticModel:
    """L2-regularized logistic regression (weights only) by damped Newton steps.

    Minimizes mean negative log-likelihood plus ``l2/2 * |w|^2``. Full-batch
    and free of randomness, so identical inputs give identical models.
    """
    if not samples:
        raise DegenerateData("no training samples")
    X = np.array([s.scores if isinstance(s, CriteriaVector) else s for s, _ in samples], dtype=float)
    y = np.array([1.0 if label else 0.0 for _, label in samples])
    if y.min() == y.max():
        raise DegenerateData("training needs at least one sample of each label")
    n, d = X.shape
    A = np.hstack([X, np.ones((n, 1))])
    reg = np.full(d + 1, l2)
    reg[-1] = 0.0
    theta = np.zeros(d + 1)
    f = _objective(theta, X, y, l2)
    converged = False
    grad_norm = math.inf
    step = 0
    for step in range(1, max_steps + 1):
        p = expit(A @ theta)
        grad = A.T @ (p - y) / n + reg * theta
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm <= tol:
            converged = True
            break
        H = (A.T * (p * (1 - p))) @ A / n + np.diag(reg)
        try:
            direction = -np.linalg.solve(H + 1e-12 * np.eye(d + 1), grad)
        except np.linalg.LinAlgError:
            direction = -grad
        t = 1.0
        slope = float(grad @ direction)
        while t > 1e-12:
            candidate = theta + t * direction
            f_new = _objective(candidate, X, y, l2)
            if f_new <= f + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            # no descent possible at machine precision
            converged = grad_norm <= math.sqrt(tol)
            break
        theta, f = candidate, f_new
    meta = TrainingMeta(samples=n, l2=l2, converged=converged, steps=step, grad_norm=grad_norm)
    return LogisticModel(tuple(theta[:-1].tolist()), float(theta[-1]), threshold, meta)


def accuracy(model: LogisticModel, samples: Sequence[tuple[CriteriaVector, bool]]) -> float:
    if not samples:
        raise EmptyInput("no samples")
    hits = sum((decide(model, v)[1] is Decision.SYNTHESIS) == bool(label) for v, label in samples)
    return hits / len(samples)


def decisive_label(synthesis_correct: bool, cot_correct: bool) -> bool | None:
    """True when only synthesis was right, False when only CoT was, None otherwise."""
    if synthesis_correct == cot_correct:
        return None
    return synthesis_correct


# ---------------------------------------------------------------------------
# calibration and leave-one-dataset-out

@dataclass(frozen=True)
class CalibrationBin:
    bin_mid: float
    empirical_rate: float
    count: int


def calibration_curve(predictions: Sequence[tuple[float, bool]], n_bins: int = 10) -> list[CalibrationBin]:
    """Equal-width bins over [0, 1]; only non-empty bins are returned."""
    if not predictions:
        raise EmptyInput("no predictions")
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    counts = [0] * n_bins
    positives = [0] * n_bins
    for p, label in predictions:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"probability {p} outside [0, 1]")
        b = min(int(p * n_bins), n_bins - 1)
        counts[b] += 1
        positives[b] += bool(label)
    return [CalibrationBin((b + 0.5) / n_bins, positives[b] / counts[b], counts[b])
            for b in range(n_bins) if counts[b]]


def calibration_csv(bins: Iterable[CalibrationBin]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["bin_mid", "empirical_rate", "count"])
    for b in bins:
        w.writerow([f"{b.bin_mid:.6g}", f"{b.empirical_rate:.6g}", b.count])
    return out.getvalue()


@dataclass(frozen=True)
class LodoRow:
    task: str
    n: int
    accuracy: float


def lodo_eval(grouped: Mapping[str, Sequence[tuple[CriteriaVector, bool]]], l2: float = DEFAULT_L2) -> list[LodoRow]:
    """Train on every task but one, score on the held-out task; one row per task."""
    if len(grouped) < 2:
        raise DegenerateData("leave-one-dataset-out needs at least two tasks")
    rows = []
    for task in sorted(grouped):
        train = [s for t in sorted(grouped) if t != task for s in grouped[t]]
        model = train_switch(train, l2=l2)
        held = list(grouped[task])
        rows.append(LodoRow(task, len(held), accuracy(model, held) if held else math.nan))
    return rows


def lodo_csv(rows: Iterable[LodoRow]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["task", "n", "accuracy"])
    for r in rows:
        w.writerow([r.task, r.n, f"{r.accuracy:.6g}"])
    return out.getvalue()


# ---------------------------------------------------------------------------
# algorithmicity

ALGO_RULE_MIN = 8


@dataclass(frozen=True)
class AlgoVerdict:
    bits: tuple[bool, ...]
    final: bool
    consistent_with_rule: bool = field(init=False)

    def __post_init__(self):
        bits = tuple(bool(b) for b in self.bits)
        if len(bits) != N_CRITERIA:
            raise ValueError(f"expected {N_CRITERIA} criterion bits")
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "consistent_with_rule", bool(self.final) == rule_verdict(bits))

    @classmethod
    def from_list(cls, values: Sequence[int]) -> "AlgoVerdict":
        if len(values) != N_CRITERIA + 1 or any(v not in (0, 1) for v in values):
            raise ValueError("expected an 11-element binary list")
        return cls(tuple(bool(v) for v in values[:N_CRITERIA]), bool(values[N_CRITERIA]))


def rule_verdict(bits: Sequence[bool]) -> bool:
    return sum(bool(b) for b in bits) >= ALGO_RULE_MIN


_BINARY_LIST_RE = re.compile(r"\[\s*([01](?:\s*,\s*[01]){10})\s*\]")


def parse_binary_list(text: str) -> list[int] | None:
    matches = _BINARY_LIST_RE.findall(text)
    if not matches:
        return None
    return [int(x) for x in re.findall(r"[01]", matches[-1])]


@dataclass
class ClassifiedAlgorithmicity:
    verdict: AlgoVerdict
    usage: TokenUsage
    warnings: list[str]


def classify_algorithmicity(instance: ReasoningInstance, provider, model_id: str, temperature: float = 0.0,
                            max_reprompts: int = 2) -> ClassifiedAlgorithmicity:
    messages = single_turn(instance, "algorithmicity")
    usage = TokenUsage()
    for _ in range(max_reprompts + 1):
        response = provider.complete(build_request(model_id, messages, temperature))
        usage = usage + response.usage
        values = parse_binary_list(response.text)
        if values is not None:
            verdict = AlgoVerdict.from_list(values)
            warnings = [] if verdict.consistent_with_rule else [
                f"final verdict {int(verdict.final)} disagrees with the {ALGO_RULE_MIN}-of-{N_CRITERIA} rule "
                f"({sum(verdict.bits)} criteria met)"]
            return ClassifiedAlgorithmicity(verdict, usage, warnings)
        messages = messages + [Message.text("assistant", response.text),
                               Message.text("user", load_template("baseline/algorithmicity_reprompt"))]
    raise UnclassifiedInstance(f"instance {instance.id}: no 11-element binary list after {max_reprompts} re-prompts")
