"""Forward model of 1-out-of-k sampling: Poisson mixtures and their error bounds.

A flow of size v contributes a Poisson(p*v) sampled count, so the law of the
sampled count of a random flow is the mixture Q_j = E[(p v)^j e^{-p v} / j!].
Every Poisson term is evaluated as exp(j ln(lam) - lam - lgamma(j+1)); sums over
the flow-size support are accumulated with a shifted log-sum-exp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import gammaln, logsumexp
from scipy.stats import poisson

from .model import DiscretePmf

# Poisson terms further than this (in log units) below their peak are below
# 1e-304 in absolute value and are skipped.
_LOG_CUTOFF = 700.0


@dataclass(frozen=True)
class MixtureResult:
    probs: DiscretePmf  # Q_0..Q_jmax; tail_mass holds the mixture mass above j_max
    truncation_error: float  # flow-size mass beyond the explicit support, not propagated


def _check_p(p: float) -> None:
    if not (0.0 < p <= 1.0):
        raise ValueError(f"sampling rate p must lie in (0, 1], got {p}")


def log_poisson(j, lam):
    """log of the Poisson(lam) pmf at j, with lam = 0 handled exactly."""
    j = np.asarray(j, dtype=float)
    lam = np.asarray(lam, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = j * np.log(lam) - lam - gammaln(j + 1.0)
    return np.where(lam == 0.0, np.where(j == 0, 0.0, -np.inf), out)


def _lam_window(j: int) -> tuple[float, float]:
    """Range of lam where log Poisson(j; lam) is within the cutoff of its peak."""

    def gap(lam):
        return j * math.log(lam / j) - lam + j + _LOG_CUTOFF

    if j == 0:
        return 0.0, _LOG_CUTOFF
    lo = 0.0 if gap(1e-300) > 0 else brentq(gap, 1e-300, j)
    hi_bracket = j + _LOG_CUTOFF
    while gap(hi_bracket) > 0:
        hi_bracket *= 2
    return lo, brentq(gap, j, hi_bracket)


def _window_slice(v_pmf: DiscretePmf, p: float, j: int) -> slice:
    lo, hi = _lam_window(j)
    start = v_pmf.support_start
    i0 = max(0, math.floor(lo / p) - start)
    i1 = min(len(v_pmf.probs), math.ceil(hi / p) - start + 1)
    return slice(i0, max(i0, i1))


def mixture_q(v_pmf: DiscretePmf, p: float, j_max: int) -> MixtureResult:
    """Poisson mixture law of the sampled count for flows distributed as ``v_pmf``."""
    _check_p(p)
    if j_max < 0:
        raise ValueError("j_max must be >= 0")
    ell = v_pmf.support.astype(float)
    with np.errstate(divide="ignore"):
        log_w = np.log(v_pmf.probs)
    lam = p * ell
    q = np.zeros(j_max + 1)
    for j in range(j_max + 1):
        sl = _window_slice(v_pmf, p, j)
        if sl.stop > sl.start:
            terms = log_w[sl] + log_poisson(j, lam[sl])
            q[j] = math.exp(logsumexp(terms)) if np.isfinite(terms).any() else 0.0
    above = _mixture_sf(v_pmf, p, j_max + 1)
    return MixtureResult(DiscretePmf.unnormalized(0, q, above), float(v_pmf.tail_mass))


def _mixture_sf(v_pmf: DiscretePmf, p: float, j: int) -> float:
    """Sum over the explicit support of pmf(l) * P(Poisson(p l) >= j)."""
    if j <= 0:
        return math.fsum(v_pmf.probs)
    lo, hi = _lam_window(j)
    start = v_pmf.support_start
    i0 = max(0, math.floor(lo / p) - start)
    i1 = min(len(v_pmf.probs), math.ceil(hi / p) - start + 1)
    inside = 0.0
    if i1 > i0:
        lam = p * (start + np.arange(i0, i1, dtype=float))
        inside = float(np.dot(v_pmf.probs[i0:i1], poisson.sf(j - 1, lam)))
    # above the window the survival probability is 1 to double precision
    beyond = math.fsum(v_pmf.probs[max(i1, 0):]) if i1 < len(v_pmf.probs) else 0.0
    return inside + beyond


def forward_sampled_pmf(v_pmf: DiscretePmf, p: float, nu: float, j_max: int) -> DiscretePmf:
    """Predicted pmf of the sampled flow size: Q_j / nu for j = 1..j_max."""
    if not (0.0 < nu <= 1.0):
        raise ValueError(f"flow sampling probability nu must lie in (0, 1], got {nu}")
    mix = mixture_q(v_pmf, p, j_max)
    return DiscretePmf.unnormalized(1, mix.probs.probs[1:] / nu, mix.probs.tail_mass / nu)


def forward_sampled_ccdf(v_pmf: DiscretePmf, p: float, nu: float, js: Sequence[int]) -> np.ndarray:
    """Predicted P(sampled size >= j) for each j >= 1: E[P(Poisson(p v) >= j)] / nu.

    Flow-size mass beyond the explicit support is counted as sampled at least j
    times whenever the support already reaches far past j/p; otherwise it is left out.
    """
    _check_p(p)
    if not (0.0 < nu <= 1.0):
        raise ValueError(f"flow sampling probability nu must lie in (0, 1], got {nu}")
    out = np.empty(len(js))
    for i, j in enumerate(js):
        if j < 1:
            raise ValueError("sampled sizes start at 1")
        val = _mixture_sf(v_pmf, p, int(j))
        if v_pmf.tail_mass > 0 and p * (v_pmf.support_end + 1) >= _lam_window(int(j))[1]:
            val += v_pmf.tail_mass
        out[i] = val / nu
    return out


def flow_sampling_probability(v_pmf: DiscretePmf, p: float) -> float:
    """nu = 1 - Q_0 = P(a flow has at least one sampled packet)."""
    return float(forward_sampled_ccdf(v_pmf, p, 1.0, [1])[0])


def geom_poisson_sum(r: float, p: float, j: int) -> float:
    """S_j = sum_{l>=1} (1-r) r^l Poisson(j; p l)."""
    if not (0.0 < r < 1.0):
        raise ValueError(f"r must lie in (0, 1), got {r}")
    _check_p(p)
    if j < 0 or int(j) != j:
        raise ValueError("j must be a non-negative integer")
    log_q = math.log(r) - p
    q = math.exp(log_q)
    one_minus_q = -math.expm1(log_q)
    if j == 0:
        return (1 - r) * q / one_minus_q
    if j == 1:
        return p * (1 - r) * q / one_minus_q**2
    if j == 2:
        return 0.5 * p * p * (1 - r) * q * (1 + q) / one_minus_q**3
    return _geom_poisson_direct(r, p, int(j))


def _geom_poisson_direct(r: float, p: float, j: int) -> float:
    # log-term j ln(l) + l ln(q) is concave in l with its peak at j / (-ln q)
    log_q = math.log(r) - p
    peak = j / -log_q
    log_const = math.log1p(-r) + j * math.log(p) - math.lgamma(j + 1)
    total = 0.0
    start = 1
    block = max(1024, int(peak))
    while True:
        ell = np.arange(start, start + block, dtype=float)
        terms = np.exp(log_const + j * np.log(ell) + ell * log_q)
        part = math.fsum(terms)
        total += part
        start += block
        if start > peak and terms[-1] <= 1e-18 * total:
            return total


def tv_distance(d1: DiscretePmf, d2: DiscretePmf) -> float:
    """Total variation distance; unresolved tail masses are compared as one lump."""
    lo = min(d1.support_start, d2.support_start)
    hi = max(d1.support_end, d2.support_end)
    a = np.zeros(hi - lo + 1)
    b = np.zeros(hi - lo + 1)
    a[d1.support_start - lo : d1.support_end - lo + 1] = d1.probs
    b[d2.support_start - lo : d2.support_end - lo + 1] = d2.probs
    tv = 0.5 * (math.fsum(np.abs(a - b)) + abs(d1.tail_mass - d2.tail_mass))
    return min(1.0, tv)


def lecam_bound(flow_sizes, total_packets: int, p: float, per_flow: bool = False):
    """p * sum_i v_i^2 / V with V the total packet count (permanent flows).

    With ``per_flow=True`` the array of per-flow terms p * v_i^2 / V is returned.
    """
    _check_p(p)
    if total_packets <= 0:
        raise ValueError("total_packets must be positive")
    v = np.asarray(flow_sizes, dtype=float)
    if v.size and v.max() > total_packets:
        raise ValueError("total_packets must be at least the largest flow size")
    terms = p * v**2 / total_packets
    return terms if per_flow else float(terms.sum())


def poisson_pmf(lam: float, j_max: int) -> DiscretePmf:
    """Poisson(lam) on 0..j_max with the remainder as tail mass."""
    j = np.arange(j_max + 1)
    probs = np.exp(log_poisson(j, lam))
    return DiscretePmf(0, probs, max(0.0, float(poisson.sf(j_max, lam))))
