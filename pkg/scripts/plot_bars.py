#!/usr/bin/env python3
"""Grouped bar charts of win probability and average utility per buyer.

Reads the results.csv written by ``sra experiment`` and writes two PNGs next to it.
Needs matplotlib (``pip install .[plot]``).
"""
import argparse
import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def load(path: Path):
    table = defaultdict(dict)
    depth = {}
    with path.open() as fh:
        for row in csv.DictReader(fh):
            table[row["mechanism"]][row["id"]] = row
            depth[row["id"]] = int(row["depth"])
    buyers = sorted(depth, key=lambda b: (depth[b], b))
    return table, buyers, depth


def bars(table, buyers, depth, column: str, ylabel: str, out: Path) -> None:
    mechanisms = list(table)
    x = np.arange(len(buyers))
    width = 0.8 / len(mechanisms)
    fig, ax = plt.subplots(figsize=(max(6, len(buyers) * 0.7), 3.6))
    for k, m in enumerate(mechanisms):
        ax.bar(x + (k - (len(mechanisms) - 1) / 2) * width,
               [float(table[m][b][column]) for b in buyers], width, label=m.upper())
    ax.set_xticks(x, [f"{b}\n(d={depth[b]})" for b in buyers])
    ax.set_ylabel(ylabel)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("results", type=Path, help="results.csv from an experiment run")
    args = ap.parse_args()
    table, buyers, depth = load(args.results)
    bars(table, buyers, depth, "win_probability", "winning probability", args.results.with_name("win_probability.png"))
    bars(table, buyers, depth, "avg_utility", "average utility", args.results.with_name("avg_utility.png"))
    print(f"wrote charts next to {args.results}")


if __name__ == "__main__":
    main()
