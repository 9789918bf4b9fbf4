"""Print the error, difference-of-averages and bias tables of a finished run.

    python3 scripts/print_tables.py runs/ex1_table1
"""
import argparse
import csv
from collections import defaultdict
from pathlib import Path


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("run_dir", type=Path)
    ap.add_argument("--tables", default="error,diff_avg,bias,mean")
    args = ap.parse_args()
    with open(args.run_dir / "summary.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    by_table = defaultdict(list)
    for r in rows:
        by_table[r["table"]].append(r)
    for table in args.tables.split(","):
        if table not in by_table:
            continue
        print(f"\n[{table}]")
        print(f"{'mode':<14}{'h':>10}  {'param':<8}{'n':>4}{'value':>14}{'std':>12}")
        for r in by_table[table]:
            std = f"{float(r['std']):.3e}" if r["std"] else ""
            print(f"{r['mode']:<14}{r['h']:>10}  {r['param']:<8}{r['n']:>4}{float(r['value']):>14.4e}{std:>12}")


if __name__ == "__main__":
    main()
