"""Make two synthetic test images and run ``multimix mix-preview`` on them."""

import argparse
import sys
from pathlib import Path

import numpy as np

from multimix.cli import main as cli_main
from multimix.ppm import write_ppm


def synthetic_pair(h=64, w=96):
    y, x = np.mgrid[0:h, 0:w]
    stripes = np.stack([(x // 8 % 2) * 220, y * 255 // h, np.full_like(x, 40)], -1)
    r = np.hypot(x - w / 2, y - h / 2)
    disc = np.stack([np.where(r < h / 3, 250, 30), np.full_like(x, 120), np.where(r < h / 3, 30, 200)], -1)
    return stripes.astype(np.uint8), disc.astype(np.uint8)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/preview")
    ap.add_argument("--k", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    a, b = synthetic_pair()
    write_ppm(out / "source_a.ppm", a)
    write_ppm(out / "source_b.ppm", b)
    return cli_main(["mix-preview", f"a={out / 'source_a.ppm'}", f"b={out / 'source_b.ppm'}",
                     f"k={args.k}", "--seed", str(args.seed), "--out", str(out)])


if __name__ == "__main__":
    sys.exit(main())
