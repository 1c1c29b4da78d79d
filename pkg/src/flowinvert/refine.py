"""Joint maximum-likelihood refinement of the recovered flow-size law.

The stepwise recovery treats the sampled ccdf on [j0, j1] as an exact
rescaled power law and extrapolates it down to b0, which is only true
asymptotically.  Here every sampled count W_j (j = 1..J, plus one overflow
bin) is modelled as Poisson with mean

    K0- * sum_{l < b0} head(l) P(j | l) + K0+ * sum_{l >= b0} tail(l) P(j | l)

with the head and tail laws of :class:`FlowSizeModel` and P(j | l) the
per-flow sampling law (Binomial(l, p) by default, or Poisson(p l)).
(K0-, r, K0+, a_1..a_m) and optionally the breakpoints are fitted by
maximising that likelihood.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, logit
from scipy.stats import binom, poisson

from .aggregate import FlowHistogram
from .forward import log_poisson


@dataclass(frozen=True)
class ForwardFit:
    r: float
    K0_minus: float
    K0_plus: float
    shapes: tuple[float, ...]
    breaks: tuple[float, ...]  # original-domain breakpoints (packets)
    deviance: float
    n_bins: int
    converged: bool


class _Kernel:
    """P(sampled count = j | size l) for bins j = 1..J and the overflow bin j > J.

    ``law="poisson"`` is Poisson(p l); ``law="binomial"`` is Binomial(l, p),
    the exact law when packets are kept independently.  Sizes below
    ``exact_below`` are handled one by one; larger sizes are grouped into
    geometric blocks of relative width ``block_ratio - 1`` evaluated at the
    block's geometric midpoint (the kernel is smooth on that scale).
    """

    def __init__(self, p: float, b0: int, J: int, law: str = "poisson",
                 exact_below: int = 2000, block_ratio: float = 1.005):
        self.p, self.b0, self.J = p, b0, J
        lam_hi = J + 12.0 * math.sqrt(J) + 40.0
        L = max(b0 + 1, int(math.ceil(lam_hi / p)))
        exact_below = max(exact_below, b0 + 1)
        edges = list(range(1, min(L, exact_below) + 1))
        while edges[-1] < L:
            edges.append(max(edges[-1] + 1, int(round(edges[-1] * block_ratio))))
        self.edges = np.array(edges, dtype=float)  # block i covers [edges[i], edges[i+1])
        lo, hi = self.edges[:-1], self.edges[1:]
        mid = np.where(hi - lo > 1, np.round(np.sqrt(lo * (hi - 1))), lo)
        self.mid = mid
        js = np.arange(1, J + 1, dtype=float)[:, None]
        if law == "poisson":
            self.mat = np.exp(log_poisson(js, p * mid[None, :]))
            self.over = poisson.sf(J, p * mid)
        elif law == "binomial":
            self.mat = binom.pmf(js, mid[None, :], p)
            self.over = binom.sf(J, mid, p)
        else:
            raise ValueError(f"unknown sampling law {law!r}")

    def apply(self, block_mass: np.ndarray, beyond: float) -> np.ndarray:
        """Expected bin probabilities given the mass of each size block, plus mass beyond."""
        return np.concatenate([self.mat @ block_mass, [self.over @ block_mass + beyond]])


def _tail_ccdf(ell: np.ndarray, b0: int, shapes, breaks) -> np.ndarray:
    """ccdf of the tail law (ccdf(b0) = 1), real-valued breakpoints allowed."""
    out = np.ones_like(ell)
    los = [float(b0)] + list(breaks)
    mass = 1.0
    for i, (lo, a) in enumerate(zip(los, shapes)):
        hi = los[i + 1] if i + 1 < len(los) else math.inf
        sel = (ell >= lo) & (ell < hi)
        out[sel] = mass * (lo / ell[sel]) ** a
        if math.isfinite(hi):
            mass *= (lo / hi) ** a
    return out


def _head_pmf(ell: np.ndarray, r: float, b0: int) -> np.ndarray:
    R = r ** (b0 - 1)
    return np.where(ell < b0, (1.0 - r) * r ** (ell - 1.0) / (1.0 - R), 0.0)


def forward_fit(
    hist: FlowHistogram,
    p: float,
    b0: int,
    breaks: tuple[float, ...],
    init: dict,
    J: int | None = None,
    fit_breaks: bool = True,
    law: str = "binomial",
) -> ForwardFit:
    """Refine (r, K0-, K0+, shapes[, breaks]) by Poisson maximum likelihood.

    ``breaks`` are original-domain breakpoints used as starting values (held
    fixed when ``fit_breaks`` is false).  ``init`` needs keys r, K0_minus,
    K0_plus, shapes, e.g. the stepwise estimates.  ``J`` defaults to the 99.9th
    percentile of the sampled sizes; larger sizes share one overflow bin.
    """
    sizes, counts = hist.arrays()
    if J is None:
        cum = np.cumsum(counts) / counts.sum()
        J = int(sizes[min(np.searchsorted(cum, 0.999), len(sizes) - 1)])
    J = max(J, 3)
    obs = np.zeros(J + 1)
    inside = sizes <= J
    obs[sizes[inside] - 1] = counts[inside]
    obs[J] = counts[~inside].sum()
    breaks = tuple(float(b) for b in breaks if b > b0)
    m = len(breaks) + 1
    shapes0 = list(init["shapes"])[-m:]
    kern = _Kernel(p, b0, J, law)
    edges = kern.edges
    in_tail = edges[:-1] >= b0
    head_cache: dict = {}

    def head_bins(r):
        if head_cache.get("r") != r:
            head_cache["r"] = r
            head_cache["bins"] = kern.apply(_head_pmf(edges[:-1], r, b0), 0.0)
        return head_cache["bins"]

    def unpack(theta):
        k_minus, r, k_plus = math.exp(theta[0]), float(expit(theta[1])), math.exp(theta[2])
        shapes = np.exp(theta[3 : 3 + m])
        if fit_breaks and m > 1:
            # log-gaps keep the breakpoints ordered and above b0
            brk = tuple(b0 + np.cumsum(np.exp(theta[3 + m :])))
        else:
            brk = breaks
        return k_minus, r, k_plus, shapes, brk

    def deviance(theta):
        k_minus, r, k_plus, shapes, brk = unpack(theta)
        ccdf = _tail_ccdf(edges, b0, shapes, brk)
        tail = kern.apply(np.where(in_tail, ccdf[:-1] - ccdf[1:], 0.0), ccdf[-1])
        lam = k_minus * head_bins(r) + k_plus * tail
        lam = np.maximum(lam, 1e-300)
        with np.errstate(divide="ignore", invalid="ignore"):
            term = np.where(obs > 0, obs * np.log(obs / lam), 0.0)
        return 2.0 * float(np.sum(term - (obs - lam)))

    theta0 = [
        math.log(max(init["K0_minus"], 1.0)),
        float(logit(min(max(init["r"], 1e-3), 1 - 1e-3))),
        math.log(max(init["K0_plus"], 1.0)),
        *np.log(np.maximum(shapes0, 1e-3)),
    ]
    if fit_breaks and m > 1:
        theta0 += list(np.log(np.diff((float(b0),) + breaks)))
    theta0 = np.array(theta0)
    res = minimize(deviance, theta0, method="L-BFGS-B")
    res = minimize(deviance, res.x, method="Nelder-Mead",
                   options={"maxfev": 4000, "xatol": 1e-6, "fatol": 1e-6, "adaptive": True})
    k_minus, r, k_plus, shapes, brk = unpack(res.x)
    return ForwardFit(r, k_minus, k_plus, tuple(float(a) for a in shapes), tuple(float(b) for b in brk),
                      float(res.fun), J + 1, bool(res.success))
