"""Recover the original flow-size law and flow counts from a sampled histogram.

Pipeline: locate the power-law pieces of the sampled ccdf, estimate their
shapes by maximum likelihood, read off eta = P(v >= b0)/nu from the first
piece, turn it into K0+ = eta * Ks, solve the geometric head from the counts
of flows sampled once and twice, and combine everything into K, nu and a
recovered :class:`FlowSizeModel`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import brentq

from .aggregate import FlowHistogram, histogram_ccdf
from .forward import geom_poisson_sum, mixture_q
from .model import DEFAULT_SUPPORT_CAP, FlowSizeModel

log = logging.getLogger(__name__)

DEFAULT_B0 = 20
DEFAULT_RESIDUAL_THRESHOLD = 0.05
DEFAULT_MAX_QUANTILE = 0.999
ETA_UPPER_QUANTILE = 0.99


class InversionError(ValueError):
    """An estimation stage could not produce a value from the data it was given."""

    def __init__(self, message: str, stage: str | None = None):
        super().__init__(message)
        self.stage = stage


class ModelMismatch(InversionError):
    """The data are incompatible with the assumed geometric head."""


@dataclass(frozen=True)
class BreakpointSet:
    j0: int
    breaks: tuple[int, ...]  # j1 .. j_{m-1}
    shapes: tuple[float, ...]  # a_1 .. a_m
    sse: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "breaks", tuple(int(b) for b in self.breaks))
        object.__setattr__(self, "shapes", tuple(float(a) for a in self.shapes))
        if len(self.shapes) != len(self.breaks) + 1:
            raise ValueError("need exactly one more shape than breakpoints")
        edges = (self.j0,) + self.breaks
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValueError("breakpoints must be strictly increasing and above j0")
        if any(not a > 0 for a in self.shapes):
            raise ValueError("Pareto shapes must be positive")

    @property
    def m(self) -> int:
        return len(self.shapes)

    def with_shapes(self, shapes: Sequence[float]) -> "BreakpointSet":
        return BreakpointSet(self.j0, self.breaks, tuple(shapes), self.sse)


# -- breakpoint detection ------------------------------------------------------


def _segment_costs(x: np.ndarray, y: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Weighted SSE and slope of the least-squares line through points i..j (inclusive)."""
    n = len(x)

    def csum(a):
        return np.concatenate([[0.0], np.cumsum(a)])

    cw, cx, cy = csum(w), csum(w * x), csum(w * y)
    cxx, cxy, cyy = csum(w * x * x), csum(w * x * y), csum(w * y * y)
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        sw = cw[j + 1] - cw[i]
        sx = cx[j + 1] - cx[i]
        sy = cy[j + 1] - cy[i]
        sxx = cxx[j + 1] - cxx[i] - sx * sx / sw
        sxy = cxy[j + 1] - cxy[i] - sx * sy / sw
        syy = cyy[j + 1] - cyy[i] - sy * sy / sw
        slope = sxy / sxx
        sse = np.maximum(syy - slope * sxy, 0.0)
    sse = np.where(j - i >= 1, sse, np.inf)
    return sse, slope


def _segmented_fit(x, y, w, m, min_points):
    """Exact optimal partition of the points into m runs, minimising total SSE."""
    n = len(x)
    sse, slope = _segment_costs(x, y, w)
    cnt = np.arange(n)[None, :] - np.arange(n)[:, None] + 1
    sse = np.where(cnt >= min_points, sse, np.inf)
    # best[s][e]: minimal SSE covering points 0..e with s+1 segments
    best = np.full((m, n), np.inf)
    arg = np.zeros((m, n), dtype=int)
    best[0] = sse[0]
    for s in range(1, m):
        # candidate = best[s-1][b-1] + sse[b][e] for segment start b
        cand = best[s - 1][:-1, None] + sse[1:, :]
        arg[s] = np.argmin(cand, axis=0) + 1
        best[s] = cand[arg[s] - 1, np.arange(n)]
    if not np.isfinite(best[m - 1, n - 1]):
        raise InversionError(f"not enough points for {m} segments of >= {min_points} points", "breakpoints")
    starts = [0] * m
    e = n - 1
    for s in range(m - 1, 0, -1):
        starts[s] = arg[s, e]
        e = starts[s] - 1
    ends = starts[1:] + [n]
    slopes = [slope[a, b - 1] for a, b in zip(starts, ends)]
    return float(best[m - 1, n - 1]), starts, slopes


def _ccdf_points(sampled_ccdf: Mapping[int, float], j_min: int, max_quantile: float):
    js = np.array(sorted(j for j, v in sampled_ccdf.items() if j >= j_min and v > 0), dtype=int)
    vals = np.array([sampled_ccdf[j] for j in js], dtype=float)
    if max_quantile < 1.0:
        keep = vals >= 1.0 - max_quantile - 1e-15
        js, vals = js[keep], vals[keep]
    return js, vals


def detect_breakpoints(
    sampled_ccdf: Mapping[int, float],
    m: int | None = None,
    j_min: int = 3,
    *,
    n_flows: int | None = None,
    max_m: int = 3,
    threshold: float = DEFAULT_RESIDUAL_THRESHOLD,
    max_quantile: float = DEFAULT_MAX_QUANTILE,
    min_points: int = 2,
) -> BreakpointSet:
    """Fit straight segments to the log-log ccdf from ``j_min`` upward.

    Candidate breakpoints are the integer sizes present in the ccdf, searched
    exhaustively (dynamic programming over the segment SSE table).  When
    ``n_flows`` is given, points are weighted by the inverse binomial variance
    of log ccdf, c * n / (1 - c), and the segment count (``m=None``: 1..max_m)
    is picked by a chi-square BIC; otherwise points are unweighted.

    j0 is the smallest size from which every first-segment residual stays
    below ``threshold`` (natural-log units); the fit is redone from j0 until
    this holds.  Shapes returned are the negated slopes (starting values only).
    """
    if m is not None and m < 1:
        raise ValueError("m must be >= 1")
    js_all, vals_all = _ccdf_points(sampled_ccdf, j_min, max_quantile)
    candidates = [m] if m is not None else list(range(1, max_m + 1))
    start = 0
    while True:
        js, vals = js_all[start:], vals_all[start:]
        x, y = np.log(js), np.log(vals)
        if n_flows:
            w = vals * n_flows / np.maximum(1.0 - vals, 1.0 / n_flows)
        else:
            w = np.ones_like(x)
        fits = {mm: _segmented_fit(x, y, w, mm, min_points) for mm in candidates if len(x) >= mm * min_points}
        if not fits:
            raise InversionError(
                f"insufficient ccdf support from j={js[0] if len(js) else j_min}: "
                f"{len(js)} points for {candidates[0]} segment(s)", "breakpoints")
        mm = m if m is not None else _pick_by_bic(fits, len(x), weighted=bool(n_flows))
        sse, starts, slopes = fits[mm]
        end = starts[1] if mm > 1 else len(x)
        xs, ys, ws = x[:end], y[:end], w[:end]
        intercept = (np.dot(ws, ys) - slopes[0] * np.dot(ws, xs)) / ws.sum()
        resid = np.abs(ys - intercept - slopes[0] * xs)
        bad = np.nonzero(resid >= threshold)[0]
        shift = 0 if len(bad) == 0 else int(bad[-1]) + 1
        # a bad point at the far end of the first run is a knee issue, not a start issue
        if shift == 0 or end - shift < max(min_points, end // 2):
            break
        start += shift
    breaks = tuple(int(js[s]) for s in starts[1:])
    shapes = tuple(max(-s, 1e-12) for s in slopes)
    return BreakpointSet(int(js[0]), breaks, shapes, sse)


def _pick_by_bic(fits: dict, n: int, weighted: bool) -> int:
    def bic(mm):
        sse = fits[mm][0]
        n_params = 3 * mm - 1
        fit_term = sse if weighted else n * math.log(max(sse / n, 1e-20))
        return fit_term + n_params * math.log(n)

    return min(fits, key=bic)


# -- shape estimation ------------------------------------------------------------


def fit_pareto_shape(
    sampled_hist: FlowHistogram,
    j_lo: int,
    j_hi: float = math.inf,
    *,
    discrete: bool = False,
) -> float:
    """Maximum-likelihood Pareto shape for flows with size in [j_lo, j_hi).

    With ``j_hi`` infinite and ``discrete=False`` this is the Hill estimator
    n / sum(ln(j / j_lo)); a finite ``j_hi`` uses the truncated-Pareto
    likelihood.  ``discrete=True`` fits the integer law
    P(size >= j) = (j_lo / j)**a (continuous ccdf sampled at integers), which
    removes the downward bias of the Hill form on small integer sizes.
    """
    sizes, n = sampled_hist.arrays()
    sel = (sizes >= j_lo) & (sizes < j_hi)
    sizes, n = sizes[sel].astype(float), n[sel].astype(float)
    total = n.sum()
    if total == 0:
        raise InversionError(f"no flows with size in [{j_lo}, {j_hi})", "shape")
    if total < 10:
        raise InversionError(f"only {int(total)} flows in [{j_lo}, {j_hi}); need at least 10", "shape")
    if discrete:
        return _discrete_pareto_mle(sizes, n, j_lo, j_hi)
    s = float(np.dot(n, np.log(sizes / j_lo)))
    if s <= 0:
        raise InversionError("all sizes equal j_lo: the shape estimate diverges", "shape")
    if math.isinf(j_hi):
        return total / s
    mean_log = s / total
    c = math.log(j_hi / j_lo)

    def score(a):
        # d/da of the mean truncated-Pareto log-likelihood
        return 1.0 / a - mean_log - c / math.expm1(a * c)

    return _solve_score(score)


def _discrete_pareto_mle(sizes, n, j_lo, j_hi) -> float:
    lo_log = np.log(sizes / j_lo)
    hi_log = np.log((sizes + 1.0) / j_lo)
    trunc = math.log(j_hi / j_lo) if math.isfinite(j_hi) else math.inf
    total = n.sum()
    if np.all(sizes == j_lo) and math.isinf(trunc):
        raise InversionError("all sizes equal j_lo: the shape estimate diverges", "shape")

    def score(a):
        # P(size = j) = exp(-a lo) - exp(-a hi), conditioned on size < j_hi
        e_lo = np.exp(-a * lo_log)
        e_hi = np.exp(-a * hi_log)
        num = -lo_log * e_lo + hi_log * e_hi
        val = float(np.dot(n, num / (e_lo - e_hi)))
        if math.isfinite(trunc):
            val -= total * trunc / math.expm1(a * trunc)
        return val

    return _solve_score(score)


def _solve_score(score) -> float:
    lo, hi = 1e-6, 1.0
    if score(lo) <= 0:
        raise InversionError("likelihood has no positive maximiser", "shape")
    while score(hi) > 0:
        hi *= 2
        if hi > 1e6:
            raise InversionError("shape estimate diverges (root finding did not converge)", "shape")
    return brentq(score, lo, hi, xtol=1e-14, rtol=1e-14)


def fit_shapes(sampled_hist: FlowHistogram, bp: BreakpointSet, *, discrete: bool = True) -> BreakpointSet:
    """Likelihood shape per segment.

    A segment whose likelihood has no usable maximum (too few flows, or a
    flat stretch) is merged into its neighbour by dropping the breakpoint
    between them, and the fit is repeated.
    """
    breaks = list(bp.breaks)
    while True:
        edges = [bp.j0] + breaks + [math.inf]
        shapes = []
        for i, (lo, hi) in enumerate(zip(edges, edges[1:])):
            try:
                shapes.append(fit_pareto_shape(sampled_hist, lo, hi, discrete=discrete))
            except InversionError as exc:
                if not breaks:
                    raise
                drop = i - 1 if i == len(breaks) else i
                log.warning("segment [%s, %s): %s; merging at break %d", lo, hi, exc, breaks[drop])
                del breaks[drop]
                break
        else:
            return BreakpointSet(bp.j0, tuple(breaks), tuple(shapes), bp.sse)


# -- tail rescaling, eta, counts -------------------------------------------------


def rescale_tail(sampled_ccdf: Mapping[int, float], p: float, nu: float) -> dict[float, float]:
    """Original ccdf at the points j/p: P(v >= j/p) ~ nu * P(sampled size >= j)."""
    if not (0.0 < p <= 1.0):
        raise ValueError(f"p must lie in (0, 1], got {p}")
    if not (0.0 < nu <= 1.0):
        raise ValueError(f"nu must lie in (0, 1], got {nu}")
    return {j / p: nu * c for j, c in sampled_ccdf.items()}


@dataclass(frozen=True)
class EtaEstimate:
    eta: float
    spread: float
    j_lo: int
    j_hi: int


def estimate_eta(
    sampled_ccdf: Mapping[int, float], a1: float, b0: int, p: float, j0: int, j1: int
) -> EtaEstimate:
    """Average of P(sampled >= j) / (b0 p / j)**a1 over j0..j1 (inclusive)."""
    js = [j for j in range(j0, j1 + 1) if sampled_ccdf.get(j, 0.0) > 0]
    if j1 < j0 or not js:
        raise InversionError(f"empty range for eta: [{j0}, {j1}]", "eta")
    ratios = np.array([sampled_ccdf[j] / (b0 * p / j) ** a1 for j in js])
    eta = float(ratios.mean())
    spread = float(np.max(np.abs(ratios - eta)) / eta)
    return EtaEstimate(eta, spread, js[0], js[-1])


def estimate_k0_plus(eta: float, K_s: int) -> int:
    """Flows with at least b0 packets: eta * Ks, truncated to a whole flow count."""
    if eta <= 0 or K_s < 1:
        raise ValueError("need eta > 0 and Ks >= 1")
    # small epsilon so that products landing exactly on an integer are not lost to rounding
    return int(math.floor(eta * K_s + 1e-9))


@dataclass(frozen=True)
class HeadSolution:
    r_hat: float
    K0_minus: float
    q: float


def solve_head(
    W1: float,
    W2: float,
    K_s: int | None,
    p: float,
    tail_terms: tuple[float, float] | None = None,
    *,
    normalized: bool = True,
) -> HeadSolution:
    """Solve W_j = K0- * S_j(r, p) * c + T_j for j = 1, 2.

    S_j is :func:`geom_poisson_sum`.  ``T_j`` defaults to zero.  The literal head
    weights (1-r) r^l, l >= 1 add up to r rather than 1; with ``normalized=True``
    they are rescaled to a probability law (c = 1/r) so that K0- counts flows.
    With ``normalized=False`` (c = 1) K0- = W1 / S_1.
    """
    if not (0.0 < p <= 1.0):
        raise ValueError(f"p must lie in (0, 1], got {p}")
    t1, t2 = tail_terms if tail_terms is not None else (0.0, 0.0)
    w1, w2 = W1 - t1, W2 - t2
    if W2 <= 0 or w2 <= 0:
        raise ModelMismatch("no flows sampled twice (after tail correction): cannot fit the head", "head")
    if W1 <= 0 or w1 <= 0:
        raise ModelMismatch("no flows sampled once (after tail correction): cannot fit the head", "head")
    if K_s is not None and W1 + W2 > K_s:
        raise ValueError("W1 + W2 exceeds the number of sampled flows")
    x = p * w1 / w2
    q = (2.0 - x) / (2.0 + x)
    r = q * math.exp(p)
    if not (0.0 < q < 1.0) or not (0.0 < r < 1.0):
        raise ModelMismatch(f"ratio W1/W2 = {w1 / w2:.6g} is outside the geometric head's range (q={q:.6g})", "head")
    s1 = geom_poisson_sum(r, p, 1)
    k0 = w1 / s1
    if normalized:
        k0 *= r
    return HeadSolution(r, k0, q)


def head_forward(r: float, K0_minus: float, p: float, js=(1, 2), *, normalized: bool = True) -> np.ndarray:
    """Expected W_j from K0- head flows (the map that solve_head inverts)."""
    c = 1.0 / r if normalized else 1.0
    return np.array([K0_minus * c * geom_poisson_sum(r, p, j) for j in js])


def tail_terms_from_fit(
    K0_plus: float, b0: int, bp: BreakpointSet, p: float, js=(1, 2), cap: int = DEFAULT_SUPPORT_CAP
) -> np.ndarray:
    """Expected counts of flows >= b0 packets sampled j times, under the fitted tail."""
    breaks = [round(b / p) for b in bp.breaks]
    breaks = [b for b in breaks if b > b0]
    shapes = bp.shapes[-(len(breaks) + 1):] if breaks else bp.shapes[:1]
    tail = FlowSizeModel.from_shapes(0.5, b0, 0.0, shapes, breaks)
    q = mixture_q(tail.to_pmf(cap), p, max(js)).probs.probs
    return np.array([K0_plus * q[j] for j in js])


@dataclass(frozen=True)
class CountEstimate:
    K_hat: float
    nu_hat: float
    nu_exceeds_one: bool


def estimate_counts(K0_plus: float, K0_minus: float, K_s: int) -> CountEstimate:
    if K0_plus < 0 or K0_minus < 0 or K_s < 1:
        raise ValueError("counts must be non-negative and Ks >= 1")
    K = K0_plus + K0_minus
    if K == 0:
        raise InversionError("estimated flow count is zero", "counts")
    nu = K_s / K
    if nu > 1:
        log.warning("estimated flow sampling probability %.4f exceeds 1", nu)
    return CountEstimate(K, nu, nu > 1)


def assemble_model(
    r_hat: float,
    b0: int,
    eta: float,
    K0_minus: float,
    K_hat: float,
    breakpoints: BreakpointSet,
    p: float,
    original_breaks: Sequence[float] | None = None,
) -> FlowSizeModel:
    """Recovered law: geometric head of mass K0-/K, then the fitted shapes.

    Sampled-domain breakpoints j_l become original-domain breakpoints j_l / p
    unless ``original_breaks`` (in packets) are supplied.  The first Pareto
    piece starts at b0 with ccdf(b0) = 1 - head_mass.
    """
    if K_hat <= 0:
        raise ValueError("K_hat must be positive")
    head_mass = K0_minus / K_hat
    if not 0.0 <= head_mass <= 1.0:
        raise InversionError(f"head mass {head_mass:.4g} is outside [0, 1]", "assemble")
    if original_breaks is None:
        original_breaks = [b / p for b in breakpoints.breaks]
    if len(original_breaks) != len(breakpoints.breaks):
        raise ValueError("original_breaks must match the breakpoint count")
    breaks = [int(round(b)) for b in original_breaks]
    shapes = list(breakpoints.shapes)
    # pieces whose original-domain start falls at or below b0 are absorbed by the first one
    while breaks and breaks[0] <= b0:
        breaks.pop(0)
        shapes.pop(0)
    return FlowSizeModel.from_shapes(r_hat, b0, head_mass, shapes, breaks)


# -- whole pipeline -------------------------------------------------------------


@dataclass
class InversionReport:
    k: int
    p: float
    Ks: int
    b0: int
    tail_correction: str
    breakpoints: BreakpointSet | None = None
    eta: float | None = None
    r_hat: float | None = None
    K0_plus: float | None = None
    K0_minus: float | None = None
    K_hat: float | None = None
    nu_hat: float | None = None
    recovered: FlowSizeModel | None = None
    diagnostics: dict = field(default_factory=dict)
    alternatives: dict = field(default_factory=dict)
    status: str = "ok"
    failed_stage: str | None = None
    error: str | None = None
    run_id: str | None = None

    def to_dict(self) -> dict:
        bp = self.breakpoints
        d = {
            "schema": 1,
            "status": self.status,
            "k": self.k,
            "p": self.p,
            "Ks": self.Ks,
            "b0": self.b0,
            "tail_correction": self.tail_correction,
            "j0": bp.j0 if bp else None,
            "breaks": list(bp.breaks) if bp else [],
            "shapes": list(bp.shapes) if bp else [],
            "eta": self.eta,
            "r_hat": self.r_hat,
            "K0_plus": _round_count(self.K0_plus),
            "K0_minus": _round_count(self.K0_minus),
            "K_hat": _round_count(self.K_hat),
            "nu_hat": self.nu_hat,
            "diagnostics": self.diagnostics,
            "alternatives": self.alternatives,
            "recovered_model": self.recovered.to_dict() if self.recovered else None,
        }
        if self.run_id is not None:
            d["run_id"] = self.run_id
        if self.status != "ok":
            d["failed_stage"] = self.failed_stage
            d["error"] = self.error
        return d


def _round_count(x):
    return None if x is None else int(math.floor(x + 0.5))


@dataclass(frozen=True)
class InversionConfig:
    k: int
    b0: int = DEFAULT_B0
    m: int | None = None  # None: choose 1..max_m
    max_m: int = 3
    j_min: int = 3
    tail_correction: str = "off"
    normalized_head: bool = True
    discrete_mle: bool = True
    refine: str = "none"
    sampling_law: str = "binomial"
    threshold: float = DEFAULT_RESIDUAL_THRESHOLD
    max_quantile: float = DEFAULT_MAX_QUANTILE
    support_cap: int = DEFAULT_SUPPORT_CAP

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.tail_correction not in ("off", "fitted"):
            raise ValueError("tail_correction must be 'off' or 'fitted'")
        if self.refine not in ("none", "forward"):
            raise ValueError("refine must be 'none' or 'forward'")
        if self.sampling_law not in ("poisson", "binomial"):
            raise ValueError("sampling_law must be 'poisson' or 'binomial'")

    @property
    def p(self) -> float:
        return 1.0 / self.k


def _quantile_size(hist: FlowHistogram, q: float) -> int:
    sizes, n = hist.arrays()
    cum = np.cumsum(n) / n.sum()
    return int(sizes[min(np.searchsorted(cum, q), len(sizes) - 1)])


def invert(hist: FlowHistogram, config: InversionConfig) -> InversionReport:
    """Run the full recovery on a sampled histogram.

    Estimation failures do not raise: the report comes back with
    ``status='failed'`` and the stage that failed, holding whatever was
    computed before it.
    """
    p, b0 = config.p, config.b0
    rep = InversionReport(config.k, p, hist.total_flows, b0, config.tail_correction)
    rep.diagnostics["refine"] = config.refine
    stage = "ccdf"
    try:
        if hist[1] < 1 or hist[2] < 1:
            # the head solve needs both W1 and W2; fail before any fitting
            raise ModelMismatch(f"cannot fit the head with W1={hist[1]}, W2={hist[2]}", "head")
        ccdf = histogram_ccdf(hist)
        stage = "breakpoints"
        bp = detect_breakpoints(
            ccdf, config.m, config.j_min, n_flows=hist.total_flows, max_m=config.max_m,
            threshold=config.threshold, max_quantile=config.max_quantile,
        )
        rep.diagnostics["fit_sse"] = bp.sse
        rep.diagnostics["regression_shapes"] = list(bp.shapes)
        stage = "shape"
        bp = fit_shapes(hist, bp, discrete=config.discrete_mle)
        rep.breakpoints = bp
        stage = "eta"
        j1 = bp.breaks[0] if bp.breaks else max(bp.j0, _quantile_size(hist, ETA_UPPER_QUANTILE))
        eta = estimate_eta(ccdf, bp.shapes[0], b0, p, bp.j0, j1)
        rep.eta = eta.eta
        rep.diagnostics["eta_spread"] = eta.spread
        rep.diagnostics["eta_range"] = [eta.j_lo, eta.j_hi]
        stage = "K0_plus"
        rep.K0_plus = float(estimate_k0_plus(eta.eta, hist.total_flows))
        stage = "head"
        _stepwise_head(hist, bp, rep, config)
        if config.refine == "forward":
            stage = "refine"
            _refine(hist, ccdf, rep, config)
        stage = "counts"
        cnt = estimate_counts(rep.K0_plus, rep.K0_minus, hist.total_flows)
        rep.K_hat, rep.nu_hat = cnt.K_hat, cnt.nu_hat
        rep.diagnostics["nu_exceeds_one"] = cnt.nu_exceeds_one
        stage = "assemble"
        rep.recovered = assemble_model(
            rep.r_hat, b0, rep.eta, rep.K0_minus, rep.K_hat, rep.breakpoints, p,
            rep.diagnostics.get("refined_breaks_packets"),
        )
    except (InversionError, ValueError) as exc:
        rep.status = "failed"
        rep.failed_stage = getattr(exc, "stage", None) or stage
        rep.error = str(exc)
        log.error("inversion failed at stage %s: %s", rep.failed_stage, exc)
    return rep


def _stepwise_head(hist: FlowHistogram, bp: BreakpointSet, rep: InversionReport, config: InversionConfig) -> None:
    """Head solve in both tail-correction modes; the configured one becomes primary."""
    p, b0 = config.p, config.b0
    W1, W2 = hist[1], hist[2]
    tails = tail_terms_from_fit(rep.K0_plus, b0, bp, p, (1, 2, 3, 4, 5), config.support_cap)
    rep.diagnostics["tail_terms"] = tails[:2].tolist()
    modes = {"off": None, "fitted": (float(tails[0]), float(tails[1]))}
    solutions = {}
    for name, terms in modes.items():
        try:
            sol = solve_head(W1, W2, hist.total_flows, p, terms, normalized=config.normalized_head)
            cnt = estimate_counts(rep.K0_plus, sol.K0_minus, hist.total_flows)
            solutions[name] = sol
            rep.alternatives[name] = {
                "r_hat": sol.r_hat, "K0_minus": sol.K0_minus, "K_hat": cnt.K_hat, "nu_hat": cnt.nu_hat,
            }
        except InversionError as exc:
            rep.alternatives[name] = {"error": str(exc)}
    chosen = config.tail_correction
    if chosen not in solutions:
        if config.refine == "forward" and solutions:
            # the refinement only needs a starting point
            chosen = "off" if "off" in solutions else "fitted"
        else:
            raise ModelMismatch(rep.alternatives[chosen]["error"], "head")
    sol = solutions[chosen]
    rep.r_hat, rep.K0_minus = sol.r_hat, sol.K0_minus
    pred = head_forward(sol.r_hat, sol.K0_minus, p, (1, 2, 3, 4, 5), normalized=config.normalized_head)
    if chosen == "fitted":
        pred = pred + tails
    rep.diagnostics["head_residuals"] = [(hist[j] - pred[j - 1]) / max(hist[j], 1) for j in range(1, 6)]


def _refine(hist: FlowHistogram, ccdf: Mapping[int, float], rep: InversionReport, config: InversionConfig) -> None:
    """Replace the stepwise estimates by the joint forward-model fit (m chosen by BIC)."""
    from .refine import forward_fit

    p, b0 = config.p, config.b0
    rep.alternatives["stepwise"] = {
        "j0": rep.breakpoints.j0, "breaks": list(rep.breakpoints.breaks), "shapes": list(rep.breakpoints.shapes),
        "eta": rep.eta, "r_hat": rep.r_hat, "K0_plus": rep.K0_plus, "K0_minus": rep.K0_minus,
    }
    candidates = [config.m] if config.m else list(range(1, config.max_m + 1))
    best = None
    bics = {}
    for mm in candidates:
        try:
            bp_m = detect_breakpoints(
                ccdf, mm, config.j_min, n_flows=hist.total_flows,
                threshold=config.threshold, max_quantile=config.max_quantile,
            )
        except InversionError:
            continue
        init = {"r": rep.r_hat, "K0_minus": rep.K0_minus, "K0_plus": rep.K0_plus, "shapes": bp_m.shapes}
        fit = forward_fit(hist, p, b0, tuple(b / p for b in bp_m.breaks), init, law=config.sampling_law)
        n_params = 3 + 2 * len(fit.shapes) - 1
        bic = fit.deviance + n_params * math.log(hist.total_flows)
        bics[mm] = bic
        if best is None or bic < best[0]:
            best = (bic, fit, bp_m)
    if best is None:
        raise InversionError("no segment count could be fitted", "refine")
    _, fit, bp_m = best
    breaks = [b * p for b in fit.breaks]
    j0 = bp_m.j0
    sampled_breaks = []
    for b in breaks:
        # keep the sampled-grid breaks strictly increasing above j0
        sampled_breaks.append(max((sampled_breaks or [j0])[-1] + 1, int(round(b))))
    sampled_breaks = tuple(sampled_breaks)
    rep.breakpoints = BreakpointSet(j0, sampled_breaks, fit.shapes, bp_m.sse)
    rep.r_hat, rep.K0_minus, rep.K0_plus = fit.r, fit.K0_minus, fit.K0_plus
    rep.eta = fit.K0_plus / hist.total_flows
    rep.diagnostics.update({
        "refined_breaks_packets": list(fit.breaks),
        "refine_deviance": fit.deviance,
        "refine_bins": fit.n_bins,
        "refine_bic": {str(k): v for k, v in bics.items()},
        "refine_converged": fit.converged,
        "sampling_law": config.sampling_law,
    })
