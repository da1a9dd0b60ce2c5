"""Command-line interface: ``instsynth <command>``.

Exit codes: 0 success, 1 hard failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

from .config import ConfigError, Settings, load_settings
from .core import AnswerKind, AnswerSpec, InstsynthError, ProgramArtifact, ReasoningInstance, SymbolStore

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--seed", type=int, help="random seed (overrides config)")
    p.add_argument("--cache-mode", choices=("record", "replay", "passthrough"), help="model response cache mode")
    p.add_argument("--cache-dir", help="directory of cached model responses")
    p.add_argument("--replay", metavar="DIR", help="shorthand for --cache-mode replay --cache-dir DIR")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more output")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="instsynth", description="Per-instance program synthesis toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve one question or instance file")
    _common(p)
    p.add_argument("target", help="question text, or a JSON file with {id, task, question, answer_kind, ...}")
    p.add_argument("--method", choices=("pips", "synthesis", "cot", "pot", "pot_retries"), default="pips")
    p.add_argument("--answer-kind", choices=[k.value for k in AnswerKind], default="free_text",
                   help="answer kind when TARGET is question text")
    p.add_argument("--option", dest="options", action="append", default=[], help="multiple-choice option")
    p.add_argument("--trace", action="store_true", help="print one line per loop iteration")
    p.add_argument("--json", action="store_true", help="print the result as JSON")

    p = sub.add_parser("bench", help="run a method over datasets and write results and a report")
    _common(p)
    p.add_argument("datasets", nargs="+", help="dataset JSONL files")
    p.add_argument("--method", choices=("pips", "pips_no_switch", "cot", "pot", "pot_retries"), default="pips")
    p.add_argument("--split", choices=("evaluation", "calibration", "all"), default="evaluation")
    p.add_argument("--out", default="results.jsonl", help="results JSONL (a .timing.jsonl sidecar is added)")
    p.add_argument("--report", help="report JSON path (default: <out>.report.json)")
    p.add_argument("--resume", action="store_true", help="skip instances that already have a record")

    p = sub.add_parser("train-switch", help="train the logistic switch from calibration results")
    _common(p)
    p.add_argument("results", nargs="+", help="results files containing pips_no_switch and cot records")
    p.add_argument("--out", default="switch.json", help="where to write the model JSON")
    p.add_argument("--lodo", action="store_true", help="also print a leave-one-dataset-out table")
    p.add_argument("--l2", type=float, default=1e-4, help="L2 strength on the weights")

    p = sub.add_parser("analyze", help="static analysis of a program, a directory of programs, or a results file")
    _common(p)
    p.add_argument("path")
    p.add_argument("--run", action="store_true", help="also execute the program (single file only)")
    p.add_argument("--symbols", help="JSON file passed to solve when --run is given")
    p.add_argument("--answer-kind", choices=[k.value for k in AnswerKind], default="free_text")

    p = sub.add_parser("split", help="tag calibration/evaluation splits in a dataset")
    _common(p)
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--fraction", type=float, help="calibration fraction (default from config)")

    p = sub.add_parser("report", help="summarize results files")
    _common(p)
    p.add_argument("results", nargs="+")
    p.add_argument("--csv", help="write per-task accuracy CSV here")
    p.add_argument("--hm-offset", type=float, help="offset added to every accuracy in the harmonic mean")
    p.add_argument("--method", help="only records of this method")
    return parser


def _settings(args) -> Settings:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.replay:
        overrides += ["cache_mode=replay", f"cache_dir={args.replay}"]
    if args.cache_mode:
        overrides.append(f"cache_mode={args.cache_mode}")
    if args.cache_dir:
        overrides.append(f"cache_dir={args.cache_dir}")
    return load_settings(args.config, overrides)


def make_provider(s: Settings):
    from .provider import CachedProvider, CacheMode, HttpChatProvider, ReplayCache

    live = None
    if s.cache_mode != "replay":
        live = HttpChatProvider(s.api_base_url, s.api_key_env, s.request_timeout_seconds)
    if s.cache_mode == "passthrough":
        return live
    return CachedProvider(live, ReplayCache(s.cache_dir, CacheMode(s.cache_mode)))


def bench_config(s: Settings):
    from .bench import BenchConfig
    from .provider import PriceSheet
    from .sandbox import ExecLimits
    from .switch import LogisticModel

    model = LogisticModel.load(s.switch_model_path) if s.switch_mode == "trained" else None
    return BenchConfig(
        model_id=s.model_id,
        prices=PriceSheet(s.price_input_per_million, s.price_output_per_million),
        max_iterations=s.max_iterations,
        limits=ExecLimits(s.wall_seconds, s.memory_mb * 2**20),
        switch_mode=s.switch_mode,
        switch_model=model,
        seed=s.seed,
        concurrency=s.concurrency,
        pot_max_retries=s.pot_max_retries,
        temperature=s.temperature,
        calibration_fraction=s.calibration_fraction,
        hm_offset=s.hm_offset,
        keep_trace=s.keep_trace,
    )


def _load_instance(args) -> ReasoningInstance:
    from .bench import _instance_from_record

    path = Path(args.target)
    if path.suffix == ".json" and path.is_file():
        rec = json.loads(path.read_text(encoding="utf-8"))
        rec.setdefault("id", path.stem)
        rec.setdefault("task", "adhoc")
        return _instance_from_record(rec, path.parent, 1)
    spec = AnswerSpec(AnswerKind(args.answer_kind), tuple(args.options))
    return ReasoningInstance("adhoc", "adhoc", args.target, spec)


def cmd_solve(args, s: Settings) -> int:
    from .bench import BenchMethod, solve_instance

    cfg = bench_config(s)
    inst = _load_instance(args)
    method = {"pips": "pips", "synthesis": "pips_no_switch"}.get(args.method, args.method)
    if method == "pips_no_switch":
        from dataclasses import replace
        cfg = replace(cfg, score_no_switch_criteria=False)
    rec = solve_instance(inst, BenchMethod(method), cfg, make_provider(s))
    if args.trace:
        for t in rec.trace or []:
            run = t["run"]
            flags = [k for k, v in t["feedback"]["issues"].items() if v is True]
            print(f"iteration {t['index']}: {t['action']} status={run['status']} "
                  f"return={run['return']!r} issues={','.join(flags) or 'none'}")
    if args.json:
        print(json.dumps(rec.to_dict(), indent=2))
    else:
        if rec.route:
            print(f"route: {rec.route}")
        print(f"answer: {rec.final_answer}" if rec.final_answer is not None else "no answer")
        if rec.correct is not None:
            print(f"correct: {str(rec.correct).lower()}")
        for w in rec.warnings:
            print(f"warning: {w}", file=sys.stderr)
    if rec.error:
        print(f"error: {rec.error}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def cmd_bench(args, s: Settings) -> int:
    from .bench import build_report, load_dataset, run_benchmark

    cfg = bench_config(s)
    datasets = [load_dataset(p) for p in args.datasets]
    out = Path(args.out)
    records = run_benchmark(datasets, args.method, cfg, make_provider(s), out, split=args.split, resume=args.resume)
    records = [r for r in records if r.method == args.method]
    report = build_report(records, hm_offset=s.hm_offset)
    report_path = Path(args.report) if args.report else out.with_name(out.stem + ".report.json")
    report_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(report.text_table())
    failed = [r for r in records if r.error]
    if failed:
        print(f"{len(failed)} of {len(records)} instances failed; see the error field in {out}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def cmd_train_switch(args, s: Settings) -> int:
    from .bench import read_records, switch_training_pairs
    from .core import DegenerateData
    from .switch import accuracy, lodo_csv, lodo_eval, train_switch

    records = [r for p in args.results for r in read_records(p)]
    synth = [r for r in records if r.method == "pips_no_switch"]
    cot = [r for r in records if r.method == "cot"]
    grouped = switch_training_pairs(synth, cot)
    samples = [x for task in sorted(grouped) for x in grouped[task]]
    try:
        model = train_switch(samples, l2=args.l2)
    except DegenerateData as e:
        print(f"error: {e}. Training needs decisive instances (exactly one of synthesis and CoT correct) "
              "of both kinds; run `bench --split calibration` with pips_no_switch and cot first.",
              file=sys.stderr)
        return EXIT_FAILURE
    model.save(args.out)
    print(f"trained on {len(samples)} decisive instances; training accuracy {accuracy(model, samples):.3f}")
    print(f"model written to {args.out}")
    if args.lodo:
        try:
            print(lodo_csv(lodo_eval(grouped, l2=args.l2)), end="")
        except DegenerateData as e:
            print(f"error: leave-one-dataset-out failed: {e}", file=sys.stderr)
            return EXIT_FAILURE
    return EXIT_OK


def _analyze_file(path: Path, spec: AnswerSpec, run: bool, symbols_path: str | None) -> dict:
    from .evaluator import analyze
    from .sandbox import execute

    program = ProgramArtifact(path.read_text(encoding="utf-8") or "\n")
    outcome = None
    if run:
        symbols = SymbolStore(json.loads(Path(symbols_path).read_text("utf-8"))) if symbols_path else SymbolStore({})
        outcome = execute(program, symbols)
    issues = analyze(program, outcome, spec)
    d = {"path": str(path), "issues": issues.to_dict(), "category": issues.category}
    if outcome is not None:
        d["run"] = outcome.to_dict(timing=False)
    return d


def cmd_analyze(args, s: Settings) -> int:
    from .bench import build_report, read_records
    from .evaluator import CATEGORY_PRECEDENCE

    path = Path(args.path)
    spec = AnswerSpec(AnswerKind(args.answer_kind))
    if path.is_dir():
        files = sorted(path.glob("*.py"))
        rows = [_analyze_file(f, spec, False, None) for f in files]
        counts = {c: sum(r["category"] == c for r in rows) for c in CATEGORY_PRECEDENCE}
        for r in rows:
            print(f"{Path(r['path']).name}\t{r['category'] or 'clean'}")
        print(json.dumps({"programs": len(rows),
                          "rates": {c: (n / len(rows) if rows else 0.0) for c, n in counts.items()}},
                         indent=2))
        return EXIT_OK
    if path.suffix == ".jsonl":
        report = build_report(read_records(path))
        print(json.dumps(report.per_category_issue_rates, indent=2))
        return EXIT_OK
    print(json.dumps(_analyze_file(path, spec, args.run, args.symbols), indent=2))
    return EXIT_OK


def cmd_split(args, s: Settings) -> int:
    from .bench import load_dataset, split_calibration, write_dataset

    fraction = args.fraction if args.fraction is not None else s.calibration_fraction
    ds = split_calibration(load_dataset(args.dataset), fraction, s.seed)
    write_dataset(ds, args.out)
    n_cal = sum(i.split_tag.value == "calibration" for i in ds.instances)
    print(f"{n_cal} calibration, {len(ds.instances) - n_cal} evaluation instances written to {args.out}")
    return EXIT_OK


def cmd_report(args, s: Settings) -> int:
    from .bench import accuracy_csv, build_report, cost_report, read_records
    from .provider import PriceSheet

    records = [r for p in args.results for r in read_records(p)]
    if args.method:
        records = [r for r in records if r.method == args.method]
    offset = args.hm_offset if args.hm_offset is not None else s.hm_offset
    report = build_report(records, hm_offset=offset)
    print(report.text_table())
    prices = PriceSheet(s.price_input_per_million, s.price_output_per_million)
    for method, c in cost_report(records, prices).items():
        print(f"{method}: {c.records} records, avg tokens in={c.avg_input_tokens:.2f} "
              f"out={c.avg_output_tokens:.2f}, avg cost ${c.avg_cost_usd:.6f}")
    if args.csv:
        Path(args.csv).write_text(accuracy_csv(report), encoding="utf-8")
    return EXIT_OK


COMMANDS = {
    "solve": cmd_solve,
    "bench": cmd_bench,
    "train-switch": cmd_train_switch,
    "analyze": cmd_analyze,
    "split": cmd_split,
    "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = _settings(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args, settings)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (InstsynthError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
