#!/usr/bin/env python3
"""Start-level comparison: distance charging at 10% / 40% / 70% consumer levels.

All three runs reuse the 30-minute duration request of the technology
comparison (the bundled scenarios state this assumption), so the only
varying input is the consumer's start level. Expected outcome under the
default parameters: charging speed below the taper zone is unaffected by
the start level.

Usage: python scripts/experiment_start_levels.py [--out OUT_DIR]
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from energyshare.report import compare, write_run_artifacts
from energyshare.runner import run_scenario
from energyshare.scenario import parse_scenario

SCENARIO_DIR = Path(__file__).resolve().parents[1] / "scenarios"
RUNS = ["exp2_level10", "exp2_level40", "exp2_level70"]


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, default=Path("out/experiment_start_levels"))
    args = parser.parse_args()

    print("note: all start-level runs use the same 30-minute duration request")
    run_dirs = []
    for name in RUNS:
        scenario = parse_scenario(SCENARIO_DIR / f"{name}.cfg")
        result = run_scenario(scenario)
        run_dirs.append(write_run_artifacts(result, args.out / name))
        consumer = scenario.requesting_consumer()
        metrics = result.dataset.metrics
        gain_per_minute = metrics.consumer_gain_mah / (metrics.duration_s / 60.0)
        print(
            f"start {consumer.start_level_pct:5.1f}%  {result.outcome:10s} "
            f"gain={metrics.consumer_gain_mah:8.2f} mAh  "
            f"gain/minute={gain_per_minute:7.3f} mAh"
        )

    report = compare(run_dirs, args.out / "comparison.csv")
    print(f"\nsummary: {report.summary_path}")
    print(f"level curves for plotting: {report.curves_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
