import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats as sps

from strata_rand.core import StrataLayout
from strata_rand.errors import DomainError, TieError
from strata_rand.numerics import (IDENTITY, NORMAL, WILCOXON, ScoreSpec, chi2_cdf, chi2_quantile, chi2_sf,
                                  midpoint_integral, ranks_within_strata, riemann_abs_moment, score_positions,
                                  score_transform, score_variance_factor, std_normal_cdf, std_normal_quantile)


def test_ranks_simple():
    r = ranks_within_strata([3.2, 1.1, 2.7], StrataLayout((3,)))
    assert r.ranks.tolist() == [3, 1, 2] and not r.ties


def test_ranks_per_stratum():
    r = ranks_within_strata([3, 1, 2, 10, -1], StrataLayout((3, 2)))
    assert r.ranks.tolist() == [3, 1, 2, 2, 1]


def test_ties_error_policy():
    with pytest.raises(TieError):
        ranks_within_strata([5, 5], StrataLayout((2,)), "error")
    with pytest.raises(TieError):
        ranks_within_strata([5, 5], StrataLayout((2,)), "random", rng=None)


def test_random_ties_are_fair():
    rng = np.random.default_rng(4)
    lay = StrataLayout((2,))
    first = sum(ranks_within_strata([5, 5], lay, "random", rng).ranks[0] == 1 for _ in range(10_000))
    assert abs(first / 10_000 - 0.5) <= 0.02


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 8), min_size=1, max_size=5), st.integers(0, 2**32 - 1))
def test_ranks_agree_with_scipy(sizes, seed):
    lay = StrataLayout(tuple(sizes))
    v = np.random.default_rng(seed).normal(size=lay.n)
    r = ranks_within_strata(v, lay).ranks
    for s in range(lay.S):
        sl = lay.slice(s)
        assert np.array_equal(r[sl], sps.rankdata(v[sl]).astype(int))


def test_normal_scores_two_units():
    q = score_positions(StrataLayout((2,)), NORMAL)
    assert q[0] == pytest.approx(sps.norm.ppf(1 / 3), abs=1e-14)
    assert q[1] == pytest.approx(sps.norm.ppf(2 / 3), abs=1e-14)
    assert abs(q.sum()) < 1e-15
    assert score_variance_factor(2, NORMAL) == pytest.approx(0.37, abs=0.005)


def test_wilcoxon_scores_three_units():
    assert score_positions(StrataLayout((3,)), WILCOXON).tolist() == [0.25, 0.5, 0.75]


@pytest.mark.parametrize("ns,target", [(5, 0.56), (10, 0.69), (50, 0.89), (200, 0.96), (500, 0.98)])
def test_normal_variance_factor(ns, target):
    assert round(score_variance_factor(ns, NORMAL), 2) == target
    direct = np.var(sps.norm.ppf(np.arange(1, ns + 1) / (ns + 1)), ddof=1)
    assert score_variance_factor(ns, NORMAL) == pytest.approx(direct, rel=1e-12)


def test_score_transform_uses_ranks():
    lay = StrataLayout((2, 3))
    r = ranks_within_strata([9, 1, 5, 7, 6], lay)
    assert score_transform(r, WILCOXON).tolist() == pytest.approx([2 / 3, 1 / 3, 0.25, 0.75, 0.5])


def test_identity_score_has_no_phi():
    with pytest.raises(DomainError):
        IDENTITY.phi(0.5)
    with pytest.raises(DomainError):
        ScoreSpec("logistic")


def test_quantile_basics():
    assert std_normal_quantile(0.5) == 0.0
    with pytest.raises(DomainError):
        std_normal_quantile(0.0)
    with pytest.raises(DomainError):
        std_normal_quantile([0.2, 1.0])


def test_cdf_symmetry():
    x = np.linspace(-8, 8, 1601)
    assert np.max(np.abs(std_normal_cdf(x) + std_normal_cdf(-x) - 1)) < 1e-15


def test_against_scipy():
    p = np.concatenate([np.logspace(-300, -1, 400), np.linspace(0.01, 0.99, 500), 1 - np.logspace(-16, -1, 100)])
    ours = std_normal_quantile(p)
    ref = sps.norm.ppf(p)
    assert np.max(np.abs(ours - ref) / np.maximum(1, np.abs(ref))) < 1e-14


def test_cdf_against_high_precision():
    mpmath = pytest.importorskip("mpmath")
    mpmath.mp.dps = 40
    x = np.linspace(-37, 8, 500)
    ref = np.array([float(mpmath.ncdf(mpmath.mpf(v))) for v in x])
    # relative condition number of Phi grows like x^2 in the lower tail
    assert np.all(np.abs(std_normal_cdf(x) - ref) / ref <= 4e-16 * (1 + x * x))


def test_quadrature():
    assert midpoint_integral(lambda x: x**3) == pytest.approx(0.25, abs=1e-3)
    assert midpoint_integral(lambda x: std_normal_quantile(x) ** 4) == pytest.approx(3.0, abs=1e-3)


def test_riemann_inequality_small():
    for ns in range(1, 60):
        assert riemann_abs_moment(ns, WILCOXON, 3) <= 0.25
        assert riemann_abs_moment(ns, NORMAL, 4) <= 3.0


def test_chi2_boundaries():
    assert chi2_sf(0.0, 4) == 1.0
    assert chi2_cdf(0.0, 4) == 0.0
    for bad in (0, 1.5, -2):
        with pytest.raises(DomainError):
            chi2_sf(1.0, bad)
    with pytest.raises(DomainError):
        chi2_sf(-1.0, 2)
    with pytest.raises(DomainError):
        chi2_quantile(1.0, 2)


def test_chi2_identities():
    assert chi2_quantile(0.95, 1) == pytest.approx(std_normal_quantile(0.975) ** 2, abs=1e-10)
    assert chi2_sf(chi2_quantile(0.95, 3), 3) == pytest.approx(0.05, abs=1e-10)
    # two degrees of freedom: exponential with mean 2
    for x in (0.1, 1.0, 7.0, 80.0):
        assert chi2_sf(x, 2) == pytest.approx(math.exp(-x / 2), rel=1e-13)


@pytest.mark.parametrize("k", [1, 2, 3, 5, 10, 30])
def test_chi2_against_scipy(k):
    for x in np.concatenate([np.linspace(0.01, 4 * k + 40, 200), [1e-6, 500.0]]):
        assert chi2_cdf(x, k) == pytest.approx(sps.chi2.cdf(x, k), rel=1e-12, abs=1e-300)
        assert chi2_sf(x, k) == pytest.approx(sps.chi2.sf(x, k), rel=1e-11, abs=1e-300)
    for p in (1e-8, 0.01, 0.5, 0.95, 1 - 1e-9):
        assert chi2_quantile(p, k) == pytest.approx(sps.chi2.ppf(p, k), rel=1e-10)
