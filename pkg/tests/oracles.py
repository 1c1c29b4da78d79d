"""Reference computations written independently of the package internals.

Everything here is plain ``math`` / ``numpy`` straight from the defining
formulas, without the log-space windowing, closed forms or vectorised
shortcuts used in ``flowinvert``.
"""

from __future__ import annotations

import math

import numpy as np


def piecewise_ccdf(j: int, r: float, b0: int, head_mass: float, shapes, breaks) -> float:
    """P(v >= j) from the definition: truncated geometric head, chained power laws."""
    if j <= 1:
        return 1.0
    tail0 = 1.0 - head_mass
    if j < b0:
        # head pmf (1-r) r^(l-1) / (1 - r^(b0-1)) on 1..b0-1, scaled to head_mass
        z = 1.0 - r ** (b0 - 1)
        head_left = sum((1 - r) * r ** (l - 1) / z for l in range(j, b0))
        return tail0 + head_mass * head_left
    lo, mass = b0, tail0
    edges = list(breaks) + [math.inf]
    for a, hi in zip(shapes, edges):
        if j < hi:
            return mass * (lo / j) ** a
        mass *= (lo / hi) ** a
        lo = hi
    raise AssertionError("unreachable")


def poisson_term(j: int, lam: float) -> float:
    if lam == 0:
        return 1.0 if j == 0 else 0.0
    return math.exp(j * math.log(lam) - lam - math.lgamma(j + 1))


def geom_poisson_direct(r: float, p: float, j: int, ell_max: int = 10**6) -> float:
    """sum_{l=1}^{ell_max} (1-r) r^l Poisson(j; p l), summed term by term."""
    ell = np.arange(1, ell_max + 1, dtype=float)
    with np.errstate(divide="ignore"):
        log_terms = math.log1p(-r) + ell * math.log(r) + j * np.log(p * ell) - p * ell - math.lgamma(j + 1)
    return math.fsum(np.exp(log_terms))


def pareto_sampled_ratio(a: float, j: int) -> float:
    """Large-scale limit of nu P(sampled >= j) / P(v >= j/p) for a pure Pareto tail.

    In the continuum limit the sampled count of a flow of size v ~ Pareto(a)
    is a Poisson mixture whose ccdf is Gamma(j - a) / Gamma(j) * (lo p)^a,
    while P(v >= j/p) = (lo p / j)^a.
    """
    return j**a * math.exp(math.lgamma(j - a) - math.lgamma(j))


def empirical_tv(x: np.ndarray, y: np.ndarray) -> float:
    """Total variation between the empirical laws of two integer samples."""
    hi = int(max(x.max(), y.max())) + 1
    fx = np.bincount(x, minlength=hi) / len(x)
    fy = np.bincount(y, minlength=hi) / len(y)
    return 0.5 * float(np.abs(fx - fy).sum())


def empirical_tv_to_law(x: np.ndarray, law: np.ndarray) -> float:
    """TV between the empirical law of ``x`` and a pmf on 0..len(law)-1 (rest of mass lumped)."""
    hi = max(int(x.max()) + 1, len(law))
    f = np.bincount(x, minlength=hi) / len(x)
    g = np.zeros(hi)
    g[: len(law)] = law
    return 0.5 * float(np.abs(f - g).sum() + max(0.0, 1.0 - law.sum()))
