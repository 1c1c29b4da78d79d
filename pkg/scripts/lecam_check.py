"""Monte Carlo check of the Le Cam bound for 1-out-of-k sampling of a shuffled stream.

    python3 scripts/lecam_check.py --sizes 50 50 50 50 50 50 50 50 50 50 --k 10 --reps 200000

For each flow, compares the empirical law of its sampled packet count with the
Poisson(p v) law and prints the total variation next to p v^2 / V.
"""

from __future__ import annotations

import argparse

import numpy as np

from flowinvert.forward import DiscretePmf, lecam_bound, mixture_q, tv_distance
from flowinvert.synth import shuffled_sample_counts


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", type=int, nargs="+", default=[50] * 10)
    parser.add_argument("--k", type=int, default=10)
    parser.add_argument("--reps", type=int, default=100_000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    p, V = 1.0 / args.k, sum(args.sizes)
    reps = shuffled_sample_counts(args.sizes, args.k, 0, args.reps, args.seed)
    bounds = lecam_bound(args.sizes, V, p, per_flow=True)
    print(f"K={len(args.sizes)} V={V} p={p:g} replications={args.reps}")
    print(f"{'flow':>4} {'size':>5} {'TV':>8} {'bound':>8}")
    for i, v in enumerate(args.sizes):
        q = mixture_q(DiscretePmf.point_mass(v), p, v).probs
        emp = DiscretePmf.unnormalized(0, np.bincount(reps[:, i], minlength=v + 1) / args.reps)
        print(f"{i:>4} {v:>5} {tv_distance(emp, q):8.4f} {bounds[i]:8.4f}")
    print(f"aggregate bound p sum v^2 / V = {lecam_bound(args.sizes, V, p):.4f}")


if __name__ == "__main__":
    main()
