"""Benchmark harness: datasets, calibration split, method runners, metrics
and append-only result files."""

from __future__ import annotations

import csv
import io
import json
import math
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .baselines import BaselineConfig, cot_solve, pot_retries_solve, pot_solve
from .core import (
    AnswerKind,
    AnswerSpec,
    EmptyInput,
    InstsynthError,
    MediaRef,
    ReasoningInstance,
    SchemaError,
    SolveResult,
    SplitTag,
    TokenUsage,
    UnparseableAnswer,
    answers_match,
    canonical_json,
    harmonic_mean,
    normalize_answer,
)
from .evaluator import CATEGORY_PRECEDENCE
from .provider import PriceSheet, estimate_cost
from .sandbox import ExecLimits
from .switch import Decision, LogisticModel, decide, score_criteria, zero_shot_decide
from .synthesis import LoopConfig, SynthesisAborted, run_loop

_MEDIA_TYPES = {".png": "image/png", ".jpg": "image/jpeg", ".jpeg": "image/jpeg", ".gif": "image/gif",
                ".webp": "image/webp"}


class BenchMethod(str, Enum):
    PIPS = "pips"
    PIPS_NO_SWITCH = "pips_no_switch"
    COT = "cot"
    POT = "pot"
    POT_RETRIES = "pot_retries"


# ---------------------------------------------------------------------------
# datasets

@dataclass
class Dataset:
    name: str
    instances: list[ReasoningInstance]
    source_path: Path | None = None

    def __post_init__(self):
        if not self.instances:
            raise EmptyInput(f"dataset {self.name!r} has no instances")
        ids = [i.id for i in self.instances]
        if len(set(ids)) != len(ids):
            raise SchemaError(f"dataset {self.name!r} has duplicate ids")


def _instance_from_record(rec: Any, base: Path, line: int) -> ReasoningInstance:
    if not isinstance(rec, dict):
        raise SchemaError("record is not a JSON object", line)
    for key in ("id", "task", "question"):
        if not isinstance(rec.get(key), str) or not rec[key]:
            raise SchemaError(f"missing or non-string field {key!r}", line)
    try:
        spec = AnswerSpec(AnswerKind(rec.get("answer_kind", "free_text")), tuple(rec.get("options") or ()))
    except (ValueError, TypeError) as e:
        raise SchemaError(f"invalid answer specification: {e}", line) from None
    gold = None
    if rec.get("answer") is not None:
        try:
            gold = normalize_answer(rec["answer"], spec)
        except (UnparseableAnswer, ValueError) as e:
            raise SchemaError(f"gold answer does not fit its kind: {e}", line) from None
    images = rec.get("images") or []
    if not isinstance(images, list) or not all(isinstance(p, str) for p in images):
        raise SchemaError("images must be a list of paths", line)
    attachments = []
    for p in images:
        path = (base / p).resolve()
        attachments.append(MediaRef(str(path), _MEDIA_TYPES.get(path.suffix.lower(), "image/png")))
    split = SplitTag(rec["split"]) if rec.get("split") else SplitTag.UNASSIGNED
    return ReasoningInstance(rec["id"], rec["task"], rec["question"], spec, gold, attachments, split)


def load_dataset(path: str | Path, name: str | None = None) -> Dataset:
    """Parse a JSONL dataset; image paths resolve relative to the file."""
    path = Path(path)
    instances = []
    seen: set[str] = set()
    with path.open(encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"invalid JSON: {e.msg}", line_no) from None
            inst = _instance_from_record(rec, path.parent, line_no)
            if inst.id in seen:
                raise SchemaError(f"duplicate id {inst.id!r}", line_no)
            seen.add(inst.id)
            instances.append(inst)
    return Dataset(name or path.stem, instances, path)


def split_calibration(ds: Dataset, fraction: float = 0.2, seed: int = 0) -> Dataset:
    """Tag ceil(fraction * n) instances per task as calibration, the rest as evaluation."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    by_task: dict[str, list[str]] = {}
    for inst in ds.instances:
        by_task.setdefault(inst.task_name, []).append(inst.id)
    calibration: set[str] = set()
    for task, ids in by_task.items():
        order = sorted(ids)
        random.Random(f"{seed}:{task}").shuffle(order)
        calibration.update(order[:math.ceil(fraction * len(order))])
    tagged = [replace(i, split_tag=SplitTag.CALIBRATION if i.id in calibration else SplitTag.EVALUATION)
              for i in ds.instances]
    return Dataset(ds.name, tagged, ds.source_path)


def write_dataset(ds: Dataset, path: str | Path) -> None:
    """Write a dataset back to JSONL, including split tags."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as f:
        for i in ds.instances:
            rec: dict[str, Any] = {"id": i.id, "task": i.task_name, "question": i.query_text,
                                   "answer": None if i.gold_answer is None else i.gold_answer.value,
                                   "answer_kind": i.answer_spec.kind.value}
            if i.answer_spec.options:
                rec["options"] = list(i.answer_spec.options)
            if i.attachments:
                rec["images"] = [m.path for m in i.attachments]
            if i.split_tag is not SplitTag.UNASSIGNED:
                rec["split"] = i.split_tag.value
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# records

@dataclass
class RunRecord:
    instance_id: str
    task: str
    method: str
    final_answer: str | None = None
    correct: bool | None = None
    well_formed: bool = False
    non_trivial: bool = False
    attempted_code: bool = False
    issues: dict[str, bool] | None = None
    issue_category: str | None = None
    route: str | None = None
    criteria: list[float] | None = None
    switch_probability: float | None = None
    refinements: int = 0
    attempts: int = 0
    usage: TokenUsage = field(default_factory=TokenUsage)
    cost_usd: float = 0.0
    warnings: list[str] = field(default_factory=list)
    error: str | None = None
    trace: list[dict] | None = None
    wall_seconds: float = 0.0

    @property
    def key(self) -> tuple[str, str]:
        return (self.instance_id, self.method)

    def to_dict(self) -> dict:
        """Canonical content; wall-clock time is kept out so replays are byte-identical."""
        d = {
            "instance_id": self.instance_id, "task": self.task, "method": self.method,
            "final_answer": self.final_answer, "correct": self.correct,
            "well_formed": self.well_formed, "non_trivial": self.non_trivial,
            "attempted_code": self.attempted_code, "issues": self.issues,
            "issue_category": self.issue_category, "route": self.route, "criteria": self.criteria,
            "switch_probability": self.switch_probability, "refinements": self.refinements,
            "attempts": self.attempts, "usage": self.usage.to_dict(), "cost_usd": self.cost_usd,
            "warnings": list(self.warnings), "error": self.error,
        }
        if self.trace is not None:
            d["trace"] = self.trace
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunRecord":
        rec = cls(d["instance_id"], d["task"], d["method"])
        for k, v in d.items():
            if k == "usage":
                v = TokenUsage(**v)
            if hasattr(rec, k):
                setattr(rec, k, v)
        return rec


def timing_path(results_path: str | Path) -> Path:
    p = Path(results_path)
    return p.with_name(p.stem + ".timing.jsonl")


def read_records(path: str | Path) -> list[RunRecord]:
    path = Path(path)
    if not path.exists():
        return []
    records = []
    with path.open(encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                records.append(RunRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                # a torn final line from an interrupted run is dropped
                if line.endswith("\n"):
                    raise SchemaError(f"invalid result record: {e}", line_no) from None
    return records


class RecordWriter:
    """Single appender for results and their timing sidecar."""

    def __init__(self, path: str | Path, append: bool):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        mode = "a" if append else "w"
        if append and self.path.exists():
            _drop_torn_tail(self.path)
        self._results = self.path.open(mode, encoding="utf-8")
        self._timing = timing_path(self.path).open(mode, encoding="utf-8")
        self._lock = threading.Lock()

    def write(self, record: RunRecord) -> None:
        with self._lock:
            self._results.write(canonical_json(record.to_dict()).decode("utf-8") + "\n")
            self._results.flush()
            self._timing.write(json.dumps({"instance_id": record.instance_id, "method": record.method,
                                           "wall_seconds": record.wall_seconds}) + "\n")
            self._timing.flush()

    def close(self) -> None:
        self._results.close()
        self._timing.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _drop_torn_tail(path: Path) -> None:
    data = path.read_bytes()
    if data and not data.endswith(b"\n"):
        path.write_bytes(data[: data.rfind(b"\n") + 1])


# ---------------------------------------------------------------------------
# running

@dataclass(frozen=True)
class BenchConfig:
    model_id: str = "mock"
    prices: PriceSheet = field(default_factory=PriceSheet)
    max_iterations: int = 30
    limits: ExecLimits = field(default_factory=ExecLimits)
    switch_mode: str = "zero_shot"
    switch_model: LogisticModel | None = None
    seed: int = 0
    concurrency: int = 8
    pot_max_retries: int = 3
    temperature: float = 0.0
    calibration_fraction: float = 0.2
    hm_offset: float = 0.0
    keep_trace: bool = True
    score_no_switch_criteria: bool = True

    def __post_init__(self):
        if self.switch_mode not in ("zero_shot", "trained"):
            raise ValueError("switch_mode must be 'zero_shot' or 'trained'")
        if self.switch_mode == "trained" and self.switch_model is None:
            raise ValueError("switch_mode 'trained' needs a switch model")
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")

    def loop_config(self) -> LoopConfig:
        return LoopConfig(self.max_iterations, self.limits, self.model_id, self.temperature)

    def baseline_config(self) -> BaselineConfig:
        return BaselineConfig(self.model_id, self.pot_max_retries, self.limits, self.temperature)


def _record_from_result(inst: ReasoningInstance, method: BenchMethod, result: SolveResult,
                        cfg: BenchConfig) -> RunRecord:
    rec = RunRecord(inst.id, inst.task_name, method.value)
    fa = result.final_answer
    rec.final_answer = None if fa is None else fa.canonical_text
    if inst.gold_answer is not None:
        rec.correct = fa is not None and answers_match(fa, inst.gold_answer, inst.answer_spec)
    rec.well_formed = result.well_formed
    rec.non_trivial = result.non_trivial
    rec.attempted_code = result.attempted_code
    if result.final_issues is not None:
        rec.issues = result.final_issues.flags()
        rec.issue_category = result.final_issues.category
    rec.refinements = result.refinements if result.method.value == "synthesis" else 0
    rec.attempts = len(result.trace)
    rec.usage = result.usage
    rec.warnings = list(result.warnings)
    rec.wall_seconds = result.wall_seconds
    if cfg.keep_trace and result.trace:
        rec.trace = [t.to_dict(timing=False) for t in result.trace]
    return rec


def solve_instance(inst: ReasoningInstance, method: BenchMethod, cfg: BenchConfig, provider,
                   sandbox=None) -> RunRecord:
    """One record for one instance; failures are recorded, never raised."""
    start = time.perf_counter()
    criteria_usage = TokenUsage()
    criteria = probability = route = None
    try:
        if method in (BenchMethod.PIPS, BenchMethod.PIPS_NO_SWITCH):
            if method is BenchMethod.PIPS or cfg.score_no_switch_criteria:
                scored = score_criteria(inst, provider, cfg.model_id, cfg.temperature)
                criteria_usage = scored.usage
                criteria = scored.vector
            if method is BenchMethod.PIPS:
                if cfg.switch_mode == "trained":
                    probability, decision = decide(cfg.switch_model, criteria)
                else:
                    decision = zero_shot_decide(criteria)
            else:
                decision = Decision.SYNTHESIS
            route = decision.value
            if decision is Decision.SYNTHESIS:
                result = run_loop(inst, cfg.loop_config(), provider, sandbox)
            else:
                result = cot_solve(inst, cfg.baseline_config(), provider)
        elif method is BenchMethod.COT:
            result = cot_solve(inst, cfg.baseline_config(), provider)
        elif method is BenchMethod.POT:
            result = pot_solve(inst, cfg.baseline_config(), provider, sandbox)
        else:
            result = pot_retries_solve(inst, cfg.baseline_config(), provider, sandbox)
        rec = _record_from_result(inst, method, result, cfg)
    except SynthesisAborted as e:
        rec = _record_from_result(inst, method, e.partial, cfg)
        rec.error = str(e)
        rec.final_answer, rec.correct = None, (False if inst.gold_answer is not None else None)
    except (InstsynthError, OSError, ValueError) as e:
        rec = RunRecord(inst.id, inst.task_name, method.value, error=f"{type(e).__name__}: {e}",
                        correct=False if inst.gold_answer is not None else None)
    rec.route = route
    if criteria is not None:
        rec.criteria = list(criteria.scores)
        rec.warnings = list(criteria.parse_warnings) + rec.warnings
    rec.switch_probability = probability
    rec.usage = rec.usage + criteria_usage
    rec.cost_usd = estimate_cost(rec.usage, cfg.prices)
    rec.wall_seconds = time.perf_counter() - start
    return rec


def select_instances(datasets: Sequence[Dataset], split: str, cfg: BenchConfig) -> list[ReasoningInstance]:
    out = []
    for ds in datasets:
        if split != "all" and any(i.split_tag is SplitTag.UNASSIGNED for i in ds.instances):
            ds = split_calibration(ds, cfg.calibration_fraction, cfg.seed)
        for inst in ds.instances:
            if split == "all" or inst.split_tag.value == split:
                out.append(inst)
    return out


def run_benchmark(datasets: Sequence[Dataset], method: BenchMethod | str, cfg: BenchConfig, provider,
                  results_path: str | Path, sandbox=None, split: str = "evaluation", resume: bool = True,
                  max_new: int | None = None) -> list[RunRecord]:
    """Run ``method`` on every selected instance and append one record each to ``results_path``.

    With ``resume``, instances that already have a record are skipped.
    ``max_new`` stops after that many new records (used to simulate an
    interrupted run). Returns all records in the file afterwards.
    """
    method = BenchMethod(method)
    if split not in ("evaluation", "calibration", "all"):
        raise ValueError("split must be evaluation, calibration or all")
    done = {r.key for r in read_records(results_path)} if resume else set()
    todo = [i for i in select_instances(datasets, split, cfg) if (i.id, method.value) not in done]
    if max_new is not None:
        todo = todo[:max_new]
    with RecordWriter(results_path, append=resume) as writer:
        if cfg.concurrency == 1:
            for inst in todo:
                writer.write(solve_instance(inst, method, cfg, provider, sandbox))
        else:
            with ThreadPoolExecutor(cfg.concurrency) as pool:
                for rec in pool.map(lambda i: solve_instance(i, method, cfg, provider, sandbox), todo):
                    writer.write(rec)
    return read_records(results_path)


# ---------------------------------------------------------------------------
# metrics

@dataclass
class Report:
    per_task_accuracy: dict[str, float]
    harmonic_mean_accuracy: float
    per_category_issue_rates: dict[str, float]
    nontrivial_rate_per_task: dict[str, float]
    totals: dict[str, float]
    methods: list[str] = field(default_factory=list)
    hm_offset: float = 0.0

    def to_dict(self) -> dict:
        return {
            "methods": self.methods,
            "per_task_accuracy": self.per_task_accuracy,
            "harmonic_mean_accuracy": self.harmonic_mean_accuracy,
            "hm_offset": self.hm_offset,
            "per_category_issue_rates": self.per_category_issue_rates,
            "nontrivial_rate_per_task": self.nontrivial_rate_per_task,
            "totals": self.totals,
        }

    def text_table(self) -> str:
        width = max([len(t) for t in self.per_task_accuracy] + [len("harmonic mean")])
        lines = [f"{'task':<{width}}  accuracy  non-trivial"]
        for task in sorted(self.per_task_accuracy):
            lines.append(f"{task:<{width}}  {self.per_task_accuracy[task]:8.3f}  "
                         f"{self.nontrivial_rate_per_task[task]:11.3f}")
        lines.append(f"{'harmonic mean':<{width}}  {self.harmonic_mean_accuracy:8.3f}")
        lines.append("")
        lines.append("issue rates (records with code): " + ", ".join(
            f"{k}={v:.3f}" for k, v in self.per_category_issue_rates.items()))
        lines.append(f"tokens in={self.totals['input_tokens']:.0f} out={self.totals['output_tokens']:.0f} "
                     f"cost=${self.totals['cost_usd']:.4f}")
        return "\n".join(lines)


def build_report(records: Sequence[RunRecord], hm_offset: float = 0.0) -> Report:
    """Accuracy is computed over records with a gold answer."""
    if not records:
        raise EmptyInput("no records")
    by_task: dict[str, list[RunRecord]] = {}
    for r in records:
        by_task.setdefault(r.task, []).append(r)
    accuracy = {}
    nontrivial = {}
    for task, rs in sorted(by_task.items()):
        graded = [r for r in rs if r.correct is not None]
        accuracy[task] = sum(bool(r.correct) for r in graded) / len(graded) if graded else 0.0
        nontrivial[task] = sum(r.well_formed and r.non_trivial for r in rs) / len(rs)
    coded = [r for r in records if r.attempted_code]
    rates = {c: (sum(r.issue_category == c for r in coded) / len(coded) if coded else 0.0)
             for c in CATEGORY_PRECEDENCE}
    in_tok = sum(r.usage.input_tokens for r in records)
    out_tok = sum(r.usage.output_tokens for r in records)
    totals = {"records": len(records), "input_tokens": in_tok, "output_tokens": out_tok,
              "cost_usd": math.fsum(r.cost_usd for r in records)}
    return Report(accuracy, harmonic_mean(list(accuracy.values()), offset=hm_offset), rates, nontrivial, totals,
                  sorted({r.method for r in records}), hm_offset)


@dataclass(frozen=True)
class MethodCost:
    method: str
    records: int
    total_input_tokens: int
    total_output_tokens: int
    total_cost_usd: float
    avg_input_tokens: float
    avg_output_tokens: float
    avg_cost_usd: float


def cost_report(records: Iterable[RunRecord], prices: PriceSheet) -> dict[str, MethodCost]:
    groups: dict[str, list[RunRecord]] = {}
    for r in records:
        groups.setdefault(r.method, []).append(r)
    out = {}
    for method, rs in sorted(groups.items()):
        n = len(rs)
        tin = sum(r.usage.input_tokens for r in rs)
        tout = sum(r.usage.output_tokens for r in rs)
        cost = estimate_cost(TokenUsage(tin, tout), prices)
        out[method] = MethodCost(method, n, tin, tout, cost, tin / n, tout / n, cost / n)
    return out


def accuracy_csv(report: Report) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["task", "accuracy", "nontrivial_rate"])
    for task in sorted(report.per_task_accuracy):
        w.writerow([task, f"{report.per_task_accuracy[task]:.6g}", f"{report.nontrivial_rate_per_task[task]:.6g}"])
    w.writerow(["harmonic_mean", f"{report.harmonic_mean_accuracy:.6g}", ""])
    return out.getvalue()


def switch_training_pairs(synthesis_records: Iterable[RunRecord], cot_records: Iterable[RunRecord]):
    """Decisive (criteria, label) pairs grouped by task.

    Synthesis records must carry criteria scores; only instances where exactly
    one of the two methods was correct are kept.
    """
    from .switch import CriteriaVector, decisive_label

    cot = {r.instance_id: r for r in cot_records if r.correct is not None}
    grouped: dict[str, list] = {}
    for r in synthesis_records:
        if r.criteria is None or r.correct is None or r.instance_id not in cot:
            continue
        label = decisive_label(bool(r.correct), bool(cot[r.instance_id].correct))
        if label is None:
            continue
        grouped.setdefault(r.task, []).append((CriteriaVector(tuple(r.criteria)), label))
    return grouped
