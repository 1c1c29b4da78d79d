"""Tabulate nu P(sampled >= j) / P(v >= j/p) for a pure Pareto flow-size law.

    python3 scripts/tail_rescaling.py --shape 1.81 --k 100

The forward map is evaluated exactly (Poisson mixture over sizes up to the
support cap); the last column is the continuum limit j^a Gamma(j-a)/Gamma(j).
"""

from __future__ import annotations

import argparse
import math

import numpy as np

from flowinvert.forward import flow_sampling_probability, forward_sampled_ccdf
from flowinvert.model import FlowSizeModel


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--shape", type=float, default=1.81)
    parser.add_argument("--k", type=int, default=100)
    parser.add_argument("--cap", type=int, default=10**6, help="explicit pmf support")
    parser.add_argument("--tol", type=float, default=0.10)
    args = parser.parse_args(argv)
    p = 1.0 / args.k
    model = FlowSizeModel.pareto(args.shape)
    pmf = model.to_pmf(args.cap)
    nu = flow_sampling_probability(pmf, p)
    js = np.array([1, 2, 3, 4, 5, 7, 10, 15, 20, 25, 28, 30, 40, 50, 100, 200, 500, 1000])
    sampled = forward_sampled_ccdf(pmf, p, nu, js)
    print(f"pure Pareto a={args.shape}, p=1/{args.k}, nu={nu:.6f}")
    print(f"{'j':>5} {'nu*P(s>=j)':>12} {'P(v>=j/p)':>12} {'ratio':>8} {'limit':>8}  within {args.tol:.0%}")
    for j, s in zip(js, sampled):
        orig = model.ccdf(int(round(j / p)))
        limit = j**args.shape * math.exp(math.lgamma(j - args.shape) - math.lgamma(j)) if j > args.shape else math.nan
        ratio = nu * s / orig
        print(f"{j:>5} {nu * s:12.4e} {orig:12.4e} {ratio:8.4f} {limit:8.4f}  {'yes' if abs(ratio - 1) <= args.tol else 'no'}")


if __name__ == "__main__":
    main()
