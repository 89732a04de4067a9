"""Train the three spiral variants over several seeds and print the accuracy table.

Thin wrapper over ``multimix spiral`` that also prints per-seed numbers.
"""

import argparse
import sys

from multimix.cli import main as cli_main
from multimix.persist import read_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--epochs", type=int, default=3000)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="runs/spiral")
    args = ap.parse_args()
    code = cli_main(["spiral", "--seeds", str(args.seeds), f"epochs={args.epochs}",
                     f"workers={args.workers}", "--out", args.out])
    if code:
        return code
    for row in read_csv(f"{args.out}/accuracy_per_seed.csv"):
        print(f"{row['variant']:14s} seed {row['seed']}: {float(row['test_accuracy']):.2f}%")
    return 0


if __name__ == "__main__":
    sys.exit(main())
