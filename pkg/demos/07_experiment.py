"""The full protocol: every strategy on every pair, dev then test, as a report table.

Uses the packaged seconds-scale plan; ``replica`` is the full-size version.
The same run is available as ``mtlab experiment --plan replica-smoke``.
"""
import tempfile
from pathlib import Path

from mtlab.harness import load_result, render_report, replica_plan, run_experiment

with tempfile.TemporaryDirectory() as tmp:
    out = Path(tmp) / "run"
    plan = replica_plan("replica-smoke")
    result = run_experiment(plan, out)
    print(f"trained for {result.steps_run} steps in {result.wall_time:.1f}s")
    report = render_report(result)
    print(report[: report.index("Metadata")])
    print((out / "stats.txt").read_text())

    # every model is a cached node, so a second run trains nothing
    again = run_experiment(plan, out)
    print("steps on rerun:", again.steps_run)
    print("report reloads:", render_report(load_result(out / "results.txt")) == report)
