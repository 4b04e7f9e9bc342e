#!/usr/bin/env python3
"""Run the sampled-valuation experiment and print a per-depth digest.

    python scripts/run_experiment.py --config configs/grid13_depth_uniform.yaml --out results/grid13
    python scripts/run_experiment.py --samples 500 --workers 4 --out results/quick
"""
import argparse
import sys
from collections import defaultdict
from pathlib import Path

from sra.cli import ExperimentConfig, InputError, run_experiment, write_experiment


def digest(result) -> str:
    lines = ["mechanism depth win_probability avg_utility"]
    for m in result.config.mechanisms:
        by_depth = defaultdict(lambda: [0.0, 0.0])
        for b, d in result.depths.items():
            by_depth[d][0] += result.win[m][b]
            by_depth[d][1] += result.utility[m][b]
        for d in sorted(by_depth):
            win, util = by_depth[d]
            lines.append(f"{m} {d} {win:.4f} {util:.5f}")
        lines.append(f"{m} revenue {result.revenue[m]:.5f}")
    return "\n".join(lines)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--samples", type=int)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--workers", type=int)
    ap.add_argument("--out", default="results/experiment")
    args = ap.parse_args()
    overrides = {"samples": args.samples, "seed": args.seed, "workers": args.workers}
    try:
        if args.config:
            config = ExperimentConfig.from_file(args.config, **overrides)
        else:
            config = ExperimentConfig(**{k: v for k, v in overrides.items() if v is not None})
        result = run_experiment(config)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for p in write_experiment(result, Path(args.out)):
        print(f"wrote {p}")
    print(digest(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
