"""End-to-end benchmark from a TOML config.

Equivalent to ``uqshift run --config demos/experiment.toml``.  Writes
CSV tables, provenance and a markdown summary, then prints the summary.
Bold cells mark models in the best group (no significant difference
from the best mean at the 0.05 level).

    python demos/04_full_experiment.py [out_dir]
"""
import os
import sys

from uqshift import ExperimentConfig, emit_report, run_experiment

here = os.path.dirname(os.path.abspath(__file__))
config = ExperimentConfig.from_toml(os.path.join(here, "experiment.toml"))
if len(sys.argv) > 1:
    config = config.replace(output_dir=sys.argv[1])

report = run_experiment(config, jobs=2)
paths = emit_report(report, config.output_dir)
print("\n".join(paths))
print()
with open(os.path.join(config.output_dir, "report.md"), encoding="utf-8") as fh:
    print(fh.read())
if report.failures:
    print(f"{len(report.failures)} recorded failure(s), see failures.csv")
