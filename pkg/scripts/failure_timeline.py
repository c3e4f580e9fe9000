#!/usr/bin/env python3
"""Print the spine-failure throughput series as a text chart.

Reads fig10.csv written by ``distcache run --suite fig10`` and averages the
series over seeds and failure phases for each load level.
"""
import argparse
import csv
from collections import defaultdict
from pathlib import Path


def load(path):
    acc = defaultdict(list)
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            acc[(float(row["load"]), round(float(row["time"]), 1))].append(float(row["throughput"]))
    return {k: sum(v) / len(v) for k, v in acc.items()}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("results", nargs="?", default="results")
    ap.add_argument("--every", type=float, default=0.5, help="print one line per this many seconds")
    args = ap.parse_args()
    series = load(Path(args.results) / "fig10.csv")
    top = max(series.values()) or 1.0
    for lvl in sorted({k[0] for k in series}):
        print(f"offered load {lvl:g} x saturation")
        pts = sorted((t, v) for (l, t), v in series.items() if l == lvl)
        step = max(1, round(args.every / 0.1))
        for t, v in pts[step - 1::step]:
            print(f"  {t:5.1f}s {v:8.2f} {'#' * int(50 * v / top)}")


if __name__ == "__main__":
    main()
