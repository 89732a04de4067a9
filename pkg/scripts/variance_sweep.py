"""Exact Var[g~] and Var[g~'] over K and B, with the B0 crossover, for the built-in problems."""

import argparse

import numpy as np

from multimix.rand_dist import Rng
from multimix.variance_lab import (canonical_problem, check_k_monotone, check_batch_threshold,
                                   engineered_problem, random_tiny_problem)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--random", type=int, default=20, help="number of random tiny problems")
    args = ap.parse_args()

    for name, (problem, dist) in (("canonical", canonical_problem()), ("engineered", engineered_problem())):
        p1 = check_k_monotone(problem, dist, [1, 2, 4, 8, 16], cross_check=False)
        print(f"{name}: Var[g~] at K=1,2,4,8,16 (B=1):", " ".join(f"{v:.6g}" for v in p1.variances))
        b0 = check_batch_threshold(problem, dist, 4, []).b0
        bs = {1, 2, 3, 4, 8, 16, 64, 128, 256}
        if np.isfinite(b0):
            bs |= {max(int(np.floor(b0)), 1), int(np.ceil(b0)) + 1}
        p2 = check_batch_threshold(problem, dist, 4, sorted(bs))
        print(f"  B0 = {p2.b0:.6g}")
        for r in p2.rows:
            rel = "<=" if r.multimix_le else "> "
            print(f"  B={r.b:4d}  multi-mix {r.var_multimix:.6g} {rel} large-batch {r.var_largebatch:.6g}")

    fails = 0
    for i in range(args.random):
        p, d = random_tiny_problem(Rng(500 + i))
        rep = check_k_monotone(p, d, [1, 2, 4, 8])
        fails += not rep.ok
    print(f"random problems with Var[g~] not decreasing in K: {fails}/{args.random}")


if __name__ == "__main__":
    main()
