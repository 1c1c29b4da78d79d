import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowinvert.aggregate import FlowHistogram, histogram_ccdf
from flowinvert.forward import geom_poisson_sum
from flowinvert.inversion import (
    BreakpointSet,
    InversionConfig,
    InversionError,
    ModelMismatch,
    assemble_model,
    detect_breakpoints,
    estimate_counts,
    estimate_eta,
    estimate_k0_plus,
    fit_pareto_shape,
    head_forward,
    invert,
    rescale_tail,
    solve_head,
)
from flowinvert.model import FlowSizeModel, draw_flow_sizes

# -- breakpoints --------------------------------------------------------------


def test_one_segment_exact_pareto():
    ccdf = {j: j**-1.81 for j in range(1, 2000)}
    bp = detect_breakpoints(ccdf, None, j_min=3)
    assert bp.m == 1
    assert bp.shapes[0] == pytest.approx(1.81, abs=0.01)
    assert bp.j0 <= 3


def _knee_ccdf(knee=30, a1=0.54, a2=1.81, j_max=5000):
    c_knee = knee**-a1
    return {j: j**-a1 if j < knee else c_knee * (knee / j) ** a2 for j in range(1, j_max)}


@pytest.mark.parametrize("m", [2, None])
def test_two_segment_knee(m):
    bp = detect_breakpoints(_knee_ccdf(), m, j_min=2)
    assert bp.m == 2
    assert abs(bp.breaks[0] - 30) <= 2
    assert bp.shapes == pytest.approx((0.54, 1.81), abs=0.02)


def test_detection_ignores_insertion_order():
    ccdf = _knee_ccdf()
    items = list(ccdf.items())
    random.Random(3).shuffle(items)
    assert detect_breakpoints(dict(items), 2, 2) == detect_breakpoints(ccdf, 2, 2)


def test_insufficient_support_rejected():
    with pytest.raises(InversionError):
        detect_breakpoints({1: 1.0, 2: 0.5, 3: 0.2}, 2, j_min=2)
    with pytest.raises(ValueError):
        detect_breakpoints(_knee_ccdf(), 0)


def test_breakpoint_set_invariants():
    with pytest.raises(ValueError):
        BreakpointSet(3, (10, 10), (1.0, 1.0, 1.0))
    with pytest.raises(ValueError):
        BreakpointSet(3, (2,), (1.0, 1.0))
    with pytest.raises(ValueError):
        BreakpointSet(3, (), (0.0,))


# -- shape --------------------------------------------------------------------


@pytest.mark.parametrize("discrete", [False, True])
def test_degenerate_sizes_diverge(discrete):
    with pytest.raises(InversionError, match="diverge"):
        fit_pareto_shape(FlowHistogram({30: 50}), 30, discrete=discrete)


def test_shape_needs_ten_flows():
    with pytest.raises(InversionError):
        fit_pareto_shape(FlowHistogram({30: 5, 40: 4}), 30)
    with pytest.raises(InversionError):
        fit_pareto_shape(FlowHistogram({3: 50}), 30)


def test_discrete_mle_on_integer_pareto_draws():
    n, a = 10**5, 1.81
    model = FlowSizeModel.from_shapes(0.5, 30, 0.0, [a])
    hist = FlowHistogram.from_sizes(draw_flow_sizes(model, n, seed=6))
    assert abs(fit_pareto_shape(hist, 30, discrete=True) - a) <= 3 * a / math.sqrt(n)


def test_hill_on_near_continuous_draws():
    # at a scale of 10^6 packets the integer law is continuous Pareto to 1e-6
    n, a, lo = 10**5, 1.81, 10**6
    model = FlowSizeModel.from_shapes(0.5, lo, 0.0, [a])
    sizes = draw_flow_sizes(model, n, seed=7)
    hill = n / np.log(sizes / lo).sum()
    assert fit_pareto_shape(FlowHistogram.from_sizes(sizes), lo) == pytest.approx(hill, rel=1e-12)
    assert abs(hill - a) <= 3 * a / math.sqrt(n)


def test_truncated_segment_likelihood():
    model = FlowSizeModel.from_shapes(0.5, 20, 0.0, [0.52, 1.81], [3000])
    hist = FlowHistogram.from_sizes(draw_flow_sizes(model, 200_000, seed=8))
    a1 = fit_pareto_shape(hist, 20, 3000, discrete=True)
    n1 = sum(c for j, c in hist.counts.items() if j < 3000)
    assert abs(a1 - 0.52) <= 3 * 0.52 / math.sqrt(n1) * 1.5
    a2 = fit_pareto_shape(hist, 3000, discrete=True)
    assert abs(a2 - 1.81) <= 0.1


# -- rescaling, eta, counts ----------------------------------------------------


def test_rescale_identity():
    c = {1: 1.0, 2: 0.4, 3: 0.1}
    assert rescale_tail(c, 1.0, 1.0) == c


@settings(max_examples=50, deadline=None)
@given(
    vals=st.lists(st.floats(1e-6, 1.0), min_size=1, max_size=20),
    k=st.integers(1, 1000),
    nu=st.floats(1e-3, 0.5),
)
def test_rescale_linear_in_nu(vals, k, nu):
    c = {j + 1: v for j, v in enumerate(sorted(vals, reverse=True))}
    one, two = rescale_tail(c, 1 / k, nu), rescale_tail(c, 1 / k, 2 * nu)
    assert one.keys() == two.keys()
    assert all(two[x] == 2 * one[x] for x in one)


@pytest.mark.parametrize("p, nu", [(0.0, 0.5), (0.5, 0.0), (0.5, 1.5)])
def test_rescale_rejects(p, nu):
    with pytest.raises(ValueError):
        rescale_tail({1: 1.0}, p, nu)


def test_eta_exact_on_constructed_tail():
    eta, a1, b0, p = 0.3, 0.54, 20, 0.01
    ccdf = {j: eta * (b0 * p / j) ** a1 for j in range(1, 200)}
    est = estimate_eta(ccdf, a1, b0, p, 3, 30)
    assert est.eta == pytest.approx(eta, rel=1e-12)
    assert est.spread <= 1e-12
    with pytest.raises(InversionError):
        estimate_eta(ccdf, a1, b0, p, 30, 3)


def test_k0_plus_goldens():
    assert estimate_k0_plus(0.3, 1_120_546) == 336_163
    assert estimate_k0_plus(1.0, 100) == 100


def test_counts():
    c = estimate_counts(336_163, 20.1e6, 1_120_546)
    assert c.K_hat == pytest.approx(20.4e6, abs=0.05e6)
    assert c.nu_hat == pytest.approx(0.054, abs=0.001)
    assert estimate_counts(0, 500, 500).nu_hat == 1.0
    flagged = estimate_counts(0, 400, 500)
    assert flagged.nu_exceeds_one and flagged.nu_hat == 1.25
    with pytest.raises(InversionError):
        estimate_counts(0, 0, 5)


# -- head -----------------------------------------------------------------------


@pytest.mark.parametrize("normalized", [True, False])
def test_head_round_trip(normalized):
    p, K0 = 0.01, 1e6
    r = 0.7 * math.exp(p)
    assert r == pytest.approx(0.707035, abs=1e-6)
    W1, W2 = head_forward(r, K0, p, (1, 2), normalized=normalized)
    sol = solve_head(W1, W2, None, p, normalized=normalized)
    assert sol.r_hat == pytest.approx(r, rel=1e-9)
    assert sol.K0_minus == pytest.approx(K0, rel=1e-9)
    assert sol.q == pytest.approx(0.7, rel=1e-9)


def test_head_literal_closed_form():
    # unnormalised head: W_j = K0- S_j exactly
    p, r, K0 = 0.01, 0.84, 20.1e6
    W1, W2 = K0 * geom_poisson_sum(r, p, 1), K0 * geom_poisson_sum(r, p, 2)
    sol = solve_head(W1, W2, None, p, normalized=False)
    assert (sol.r_hat, sol.K0_minus) == (pytest.approx(r, rel=1e-9), pytest.approx(K0, rel=1e-9))


def test_head_with_tail_terms():
    p, r, K0, T = 0.02, 0.6, 5e5, (1200.0, 800.0)
    W1, W2 = head_forward(r, K0, p) + np.array(T)
    sol = solve_head(W1, W2, None, p, T)
    assert (sol.r_hat, sol.K0_minus) == (pytest.approx(r, rel=1e-9), pytest.approx(K0, rel=1e-9))


def test_head_mismatch_errors():
    with pytest.raises(ModelMismatch):
        solve_head(100, 0, None, 0.01)
    with pytest.raises(ModelMismatch):
        solve_head(1, 100, None, 0.01)  # q > 1
    with pytest.raises(ModelMismatch):
        solve_head(100, 10, None, 0.01, (50, 20))  # W2 - T2 < 0


# -- assembly -------------------------------------------------------------------


def test_single_segment_assembly():
    bp = BreakpointSet(3, (), (0.6,))
    m = assemble_model(0.7, 20, 0.3, 9e5, 1e6, bp, 0.01)
    j = np.array([20, 57, 1000, 10**5])
    np.testing.assert_allclose(m.ccdf(j), 0.1 * (20 / j) ** 0.6, rtol=1e-12)
    assert m.ccdf(1) == 1.0


def test_assembly_scales_breaks():
    bp = BreakpointSet(3, (30,), (0.5, 1.8))
    m = assemble_model(0.7, 20, 0.3, 9e5, 1e6, bp, 0.01)
    assert [s.lo for s in m.segments] == [20, 3000]
    m = assemble_model(0.7, 20, 0.3, 9e5, 1e6, bp, 0.01, [2873.6])
    assert [s.lo for s in m.segments] == [20, 2874]


def test_assembly_rejects_bad_head_mass():
    with pytest.raises(InversionError):
        assemble_model(0.7, 20, 0.3, 2e6, 1e6, BreakpointSet(3, (), (1.0,)), 0.01)


# -- whole pipeline -----------------------------------------------------------


def test_size_one_only_histogram_is_a_model_mismatch():
    rep = invert(FlowHistogram({1: 1000}), InversionConfig(100))
    d = rep.to_dict()
    assert d["status"] == "failed"
    assert d["failed_stage"] == "head"
    assert "W2=0" in d["error"]


def test_config_validation():
    for bad in (dict(k=0), dict(k=10, tail_correction="on"), dict(k=10, refine="yes"), dict(k=10, sampling_law="x")):
        with pytest.raises(ValueError):
            InversionConfig(**bad)


def test_report_fields(e2e_run):
    d = e2e_run["report"].to_dict()
    for key in ("schema", "k", "p", "Ks", "j0", "breaks", "shapes", "eta", "r_hat",
                "K0_plus", "K0_minus", "K_hat", "nu_hat", "diagnostics"):
        assert key in d
    assert d["schema"] == 1
    for key in ("eta_spread", "head_residuals", "fit_sse"):
        assert key in d["diagnostics"]
    assert set(d["alternatives"]) >= {"off", "fitted", "stepwise"}


@pytest.mark.parametrize("which", ["report", "stepwise"])
def test_report_invariants(e2e_run, which):
    rep = e2e_run[which]
    assert rep.status == "ok"
    assert rep.K_hat == pytest.approx(rep.K0_plus + rep.K0_minus, rel=1e-12)
    assert rep.nu_hat == pytest.approx(rep.Ks / rep.K_hat, rel=1e-12)
    assert 0 < rep.nu_hat <= 1
    j = np.arange(1, 10**5)
    c = rep.recovered.ccdf(j)
    assert c[0] == 1.0
    assert np.all(np.diff(c) <= 1e-15)


def test_trace_like_shape(e2e_run):
    rep = e2e_run["report"]
    assert rep.breakpoints.j0 == 3
    assert rep.breakpoints.m == 2


def test_end_to_end_eta(e2e_run):
    rep = e2e_run["report"]
    true_eta = e2e_run["big"] / rep.Ks  # P(v >= b0) / nu with nu = Ks / K
    assert rep.eta == pytest.approx(true_eta, rel=0.10)


def test_end_to_end_k0_plus(e2e_run):
    assert e2e_run["report"].K0_plus == pytest.approx(e2e_run["big"], rel=0.05)


def test_end_to_end_nu(e2e_run):
    rep = e2e_run["report"]
    assert rep.nu_hat == pytest.approx(rep.Ks / e2e_run["K"], rel=0.10)


def test_end_to_end_recovered_ccdf(e2e_run):
    j = np.arange(1, 10**4 + 1)
    ratio = e2e_run["report"].recovered.ccdf(j) / e2e_run["model"].ccdf(j)
    assert np.max(np.abs(ratio - 1)) <= 0.15
