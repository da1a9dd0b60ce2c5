"""Run a small benchmark fully offline from recorded model responses.

Uses the ten-question fixture under tests/fixtures/replay: five fruit counting
questions and five trivia questions. Three methods are compared, then the run
is repeated to show the results file is byte-for-byte stable.

    python3 demos/replay_benchmark.py
"""

import tempfile
from pathlib import Path

from instsynth.bench import build_report, cost_report, load_dataset, run_benchmark
from instsynth.cli import bench_config
from instsynth.config import load_settings
from instsynth.provider import CachedProvider, ReplayCache

fixture = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "replay"
settings = load_settings(fixture / "config.toml")
cfg = bench_config(settings)
dataset = load_dataset(fixture / "dataset.jsonl")

# replay only: a request that was never recorded raises instead of calling out
provider = CachedProvider(None, ReplayCache(fixture / "cache", "replay"))

out = Path(tempfile.mkdtemp())
for method in ("cot", "pot_retries", "pips"):
    records = run_benchmark([dataset], method, cfg, provider, out / f"{method}.jsonl", split="all")
    report = build_report(records)
    print(f"== {method}")
    print(report.text_table())
    print()

pips = run_benchmark([dataset], "pips", cfg, provider, out / "pips.jsonl", split="all")
print("routes:", {r.instance_id: r.route for r in pips})

costs = cost_report(pips, cfg.prices)["pips"]
print(f"pips: {costs.avg_input_tokens:.1f} input / {costs.avg_output_tokens:.1f} output tokens per question, "
      f"${costs.avg_cost_usd:.6f} each")

# same inputs, same bytes
run_benchmark([dataset], "pips", cfg, provider, out / "again.jsonl", split="all")
print("identical rerun:", (out / "pips.jsonl").read_bytes() == (out / "again.jsonl").read_bytes())
