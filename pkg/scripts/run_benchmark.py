#!/usr/bin/env python3
"""Train the baseline and siamese arms over several seeds and compare test error.

    python3 scripts/run_benchmark.py --config configs/benchmark.json --out runs/benchmark

Finished arms are picked up again on a rerun with the same --out.
"""

import argparse
import json
import os
from pathlib import Path

from san.benchmark import run_benchmark
from san.config import RunConfig


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", default=str(Path(__file__).resolve().parents[1] / "configs" / "benchmark.json"))
    parser.add_argument("--out", default="runs/benchmark")
    parser.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    parser.add_argument("--workers", type=int, default=min(4, os.cpu_count() or 1))
    args = parser.parse_args()

    run = RunConfig.load(args.config)
    summary = run_benchmark(run, args.out, seeds=tuple(args.seeds), workers=args.workers)
    base, san = summary.by_arm("baseline"), summary.by_arm("san")
    print(f"{'seed':>4}  {'baseline':>8}  {'san':>8}")
    for seed in sorted(san):
        print(f"{seed:>4}  {base[seed].test_err:8.4f}  {san[seed].test_err:8.4f}")
    print(f"mean  {summary.mean_test_err('baseline'):8.4f}  {summary.mean_test_err('san'):8.4f}")
    print(json.dumps({"san_wins": summary.san_wins(), "wall_seconds": round(summary.wall_seconds, 1),
                      "projected_seconds_4_workers": round(summary.projected_seconds(4), 1)}))


if __name__ == "__main__":
    main()
