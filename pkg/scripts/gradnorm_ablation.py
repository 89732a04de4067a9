"""Monte Carlo E||g~||^2 at a mid-training spiral snapshot for several K.

The snapshot is manifold mixup (K=1) after half of the 3000 training epochs,
retrained here unless --checkpoint points at a saved one.
"""

import argparse

from multimix.experiments import RunConfig, SpiralConfig, data_rng, gen_spiral, one_hot, train
from multimix.rand_dist import Rng
from multimix.tinynet import load_checkpoint, save_checkpoint
from multimix.variance_lab import GradProblem, SamplerConfig, estimate_sq_norm


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--checkpoint")
    ap.add_argument("--save", help="write the retrained snapshot here")
    ap.add_argument("--ks", default="1,2,5,10")
    ap.add_argument("--replicates", type=int, default=2000)
    ap.add_argument("--mc-seeds", type=int, default=1, help="repeat with this many Monte Carlo seeds")
    args = ap.parse_args()

    data = gen_spiral(data_rng(0), SpiralConfig())
    if args.checkpoint:
        net = load_checkpoint(args.checkpoint)
    else:
        net = train(data, RunConfig(mixer="manifold", k=1, epochs=1500, seed=0), log_every=1500).net
        if args.save:
            save_checkpoint(net, args.save)
    x, y = data.split("train")
    problem = GradProblem(net, x, one_hot(y, data.classes))
    for seed in range(args.mc_seeds):
        for k in (int(v) for v in args.ks.split(",")):
            cfg = SamplerConfig(problem, k=k, b=256, layers=(1, 2), pairing="permute")
            r = estimate_sq_norm(cfg, args.replicates, Rng(seed, (k,)))
            print(f"mc seed {seed} K={k:3d}: E||g||^2 = {r.mean:.5f}  95% CI [{r.ci_lo:.5f}, {r.ci_hi:.5f}]")


if __name__ == "__main__":
    main()
