import numpy as np
import pytest
from scipy.stats import binom

from flowinvert.aggregate import FlowHistogram
from flowinvert.refine import _Kernel, forward_fit


@pytest.mark.parametrize("law", ["poisson", "binomial"])
def test_kernel_columns_are_probabilities(law):
    kern = _Kernel(0.01, 20, 40, law)
    zero = np.exp(-0.01 * kern.mid) if law == "poisson" else binom.pmf(0, kern.mid, 0.01)
    np.testing.assert_allclose(kern.mat.sum(axis=0) + kern.over + zero, 1.0, atol=1e-12)
    # blocks tile the size axis without gaps
    assert kern.edges[0] == 1 and np.all(np.diff(kern.edges) >= 1)


def test_kernel_blocks_are_exact_below_threshold():
    kern = _Kernel(0.01, 20, 40, "binomial", exact_below=500)
    small = kern.edges[:-1] < 500
    np.testing.assert_array_equal(kern.mid[small], kern.edges[:-1][small])
    np.testing.assert_allclose(kern.mat[:, 50], binom.pmf(np.arange(1, 41), 51, 0.01))


@pytest.mark.slow
def test_recovers_parameters_from_expected_counts():
    # expected sampled histogram computed by brute force over every flow size
    r, b0, a, p = 0.7, 20, 1.4, 0.02
    K0_minus, K0_plus = 2e8, 1e7
    ell = np.arange(1, 200_001, dtype=float)
    head = np.where(ell < b0, (1 - r) * r ** (ell - 1) / (1 - r ** (b0 - 1)), 0.0)
    ccdf = np.where(ell >= b0, (b0 / ell) ** a, 1.0)
    tail = np.where(ell >= b0, ccdf - np.append(ccdf[1:], (b0 / (ell[-1] + 1)) ** a), 0.0)
    weights = K0_minus * head + K0_plus * tail
    J = 120
    W = np.array([np.dot(weights, binom.pmf(j, ell, p)) for j in range(1, J + 1)])
    # everything sampled more than J times (including flows beyond the grid) goes in one bin
    over = np.dot(weights, binom.sf(J, ell, p)) + K0_plus * (b0 / (ell[-1] + 1)) ** a
    counts = {j: int(round(w)) for j, w in enumerate(W, 1)}
    counts[J + 1] = int(round(over))
    hist = FlowHistogram(counts)
    init = dict(r=0.8, K0_minus=1e8, K0_plus=2e7, shapes=(1.0,))
    fit = forward_fit(hist, p, b0, (), init, J=J)
    assert fit.r == pytest.approx(r, rel=2e-3)
    assert fit.K0_minus == pytest.approx(K0_minus, rel=1e-2)
    assert fit.K0_plus == pytest.approx(K0_plus, rel=1e-2)
    assert fit.shapes[0] == pytest.approx(a, rel=1e-2)
