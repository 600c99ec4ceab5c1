"""Tests for the gamma-count distribution module.

Frozen reference constants were produced by two independent oracles:
adaptive quadrature of the incomplete-gamma integral (tests/oracles.py)
and 40-digit arithmetic with mpmath.  They are embedded as literals so
the suite does not depend on the oracle's runtime behaviour.
"""

import math

import numpy as np
import pytest
from scipy import special, stats

from gcspatial.gcdist import (
    FlatLikelihoodError,
    GcParams,
    SeriesCapError,
    gc_log_pmf,
    gc_log_pmf_grad,
    gc_mean,
    gc_pmf,
    gc_sample,
    loglik_eta_terms,
    reg_lower_gamma,
    sample_renewal_counts,
)
from oracles import fd_first, fd_second, mc_renewal_counts, \
    quad_reg_lower_gamma, series_second_moment

# Frozen by quadrature of the defining integral and mpmath (40 digits).
FROZEN_REG_LOWER = [
    # (a, x, value)
    (0.5, 1.0, 0.8427007929497151),
    (0.5, 2.0, 0.9544997361036416),
    (3.0, 1.5, 0.19115316946194187),
    (40.0, 35.0, 0.21980955482531797),
]
FROZEN_PMF = [
    # (alpha, rate, y, pmf)
    (0.5, 1.0, 0, 0.15729920705028488),
    (2.0, 8.0, 4, 0.2636634492400157),
    (1.0, 2.0, 3, 0.18044704431548372),
    (0.5, 1.7, 2, 0.15128172503742587),
]
FROZEN_DEEP_TAIL_LOG = (4.0, 0.01, 20, -642.09661570051539126)


class TestRegLowerGamma:
    def test_frozen_values(self):
        for a, x, want in FROZEN_REG_LOWER:
            got = reg_lower_gamma(a, x)
            assert got == pytest.approx(want, rel=1e-12), (a, x)

    def test_matches_quadrature_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(40):
            a = float(10.0 ** rng.uniform(-2, 2))
            x = float(10.0 ** rng.uniform(-2, 2))
            assert reg_lower_gamma(a, x) == pytest.approx(
                quad_reg_lower_gamma(a, x), abs=1e-10), (a, x)

    def test_zero_shape_convention(self):
        assert reg_lower_gamma(0.0, 0.5) == 1.0
        got = reg_lower_gamma(np.array([0.0, 1.0]), np.array([2.0, 2.0]))
        assert got[0] == 1.0
        assert got[1] == pytest.approx(1.0 - math.exp(-2.0), rel=1e-13)

    def test_domain_validation(self):
        with pytest.raises(ValueError):
            reg_lower_gamma(-1.0, 2.0)
        with pytest.raises(ValueError):
            reg_lower_gamma(1.0, -0.5)
        with pytest.raises(ValueError):
            reg_lower_gamma(np.nan, 1.0)


class TestParams:
    def test_validation(self):
        for bad in [dict(alpha=0.0, gamma_rate=1.0),
                    dict(alpha=-1.0, gamma_rate=1.0),
                    dict(alpha=1.0, gamma_rate=0.0),
                    dict(alpha=1.0, gamma_rate=1.0, exposure=-2.0),
                    dict(alpha=float("nan"), gamma_rate=1.0)]:
            with pytest.raises(ValueError):
                GcParams(**bad)

    def test_exposure_enters_through_x(self):
        p = GcParams(alpha=1.3, gamma_rate=2.0, exposure=2.5)
        assert p.x == pytest.approx(5.0)
        # pmf must equal the exposure-1 law at the combined rate
        q = GcParams(alpha=1.3, gamma_rate=5.0)
        assert gc_pmf(p, 3) == pytest.approx(gc_pmf(q, 3), rel=1e-14)


class TestPmf:
    def test_frozen_values(self):
        for alpha, rate, y, want in FROZEN_PMF:
            p = GcParams(alpha=alpha, gamma_rate=rate)
            assert gc_pmf(p, y) == pytest.approx(want, rel=1e-12)
            assert gc_log_pmf(p, y) == pytest.approx(math.log(want), rel=1e-12)

    def test_vector_matches_scalar(self):
        p = GcParams(alpha=0.7, gamma_rate=3.0)
        ys = np.arange(12)
        vec = gc_pmf(p, ys)
        for y in ys:
            assert vec[y] == gc_pmf(p, int(y))

    @pytest.mark.parametrize("alpha", [0.3, 0.5, 1.0, 1.3, 2.0, 4.0])
    @pytest.mark.parametrize("x", [0.1, 1.0, 5.0, 20.0])
    def test_normalization(self, alpha, x):
        p = GcParams(alpha=alpha, gamma_rate=x)
        total = float(np.sum(gc_pmf(p, np.arange(0, 500))))
        assert total >= 1.0 - 1e-8
        assert total <= 1.0 + 1e-12

    @pytest.mark.parametrize("rate", [0.5, 2.0, 10.0])
    def test_poisson_reduction(self, rate):
        p = GcParams(alpha=1.0, gamma_rate=rate)
        ys = np.arange(0, 51)
        ours = gc_pmf(p, ys)
        ref = stats.poisson.pmf(ys, rate)
        assert np.max(np.abs(ours - ref)) < 1e-10

    @pytest.mark.parametrize("alpha,x", [(0.3, 0.5), (1.3, 5.0), (2.0, 5.0)])
    @pytest.mark.parametrize("m", [3, 17])
    def test_partial_sums_telescope(self, alpha, x, m):
        # sum_{y<=m} pmf collapses to 1 - G((m+1) alpha, x) exactly
        p = GcParams(alpha=alpha, gamma_rate=x)
        partial = float(np.sum(gc_pmf(p, np.arange(0, m + 1))))
        want = 1.0 - reg_lower_gamma((m + 1) * alpha, x)
        assert partial == pytest.approx(want, abs=1e-12)

    def test_deep_tail_log_pmf(self):
        alpha, rate, y, want = FROZEN_DEEP_TAIL_LOG
        got = gc_log_pmf(GcParams(alpha=alpha, gamma_rate=rate), y)
        assert got == pytest.approx(want, rel=1e-12)

    def test_underflow_conventions(self):
        # pmf below 1e-300 reports 0 and log pmf reports -inf
        p = GcParams(alpha=4.0, gamma_rate=0.01)
        assert gc_pmf(p, 40) == 0.0
        assert gc_log_pmf(p, 40) == -math.inf

    def test_rejects_bad_support(self):
        p = GcParams(alpha=1.0, gamma_rate=1.0)
        with pytest.raises(ValueError):
            gc_pmf(p, -1)
        with pytest.raises(ValueError):
            gc_pmf(p, np.array([0.5, 1.5]))


class TestDispersion:
    """alpha < 1 over-disperses and alpha > 1 under-disperses."""

    @pytest.mark.parametrize("alpha,side", [(0.5, "over"), (2.0, "under")])
    def test_variance_vs_mean(self, alpha, side):
        x = 2.0 * alpha
        p = GcParams(alpha=alpha, gamma_rate=x)
        mean = gc_mean(p)
        var = series_second_moment(alpha, x) - mean ** 2
        if side == "over":
            assert var > mean * 1.05
        else:
            assert var < mean * 0.95

    def test_poisson_equidispersion(self):
        p = GcParams(alpha=1.0, gamma_rate=2.0)
        mean = gc_mean(p)
        var = series_second_moment(1.0, 2.0) - mean ** 2
        assert var == pytest.approx(mean, rel=1e-9)


class TestMean:
    def test_poisson_identity(self):
        for rate in [0.3, 3.0, 47.0]:
            p = GcParams(alpha=1.0, gamma_rate=rate)
            assert gc_mean(p) == pytest.approx(rate, rel=1e-9)

    def test_matches_renewal_monte_carlo(self):
        counts = mc_renewal_counts(alpha=2.0, rate=2.0, t=1.0,
                                   n=200_000, seed=90210)
        mc_mean = counts.mean()
        mc_se = counts.std(ddof=1) / math.sqrt(counts.size)
        series = gc_mean(GcParams(alpha=2.0, gamma_rate=2.0))
        assert abs(series - mc_mean) < 3.0 * mc_se

    def test_tail_tol_validation(self):
        p = GcParams(alpha=1.0, gamma_rate=1.0)
        for bad in [0.0, -1e-9, 1e-3, float("nan")]:
            with pytest.raises(ValueError):
                gc_mean(p, tail_tol=bad)

    def test_series_cap_raises(self):
        p = GcParams(alpha=1.0, gamma_rate=2.0e6)
        with pytest.raises(SeriesCapError):
            gc_mean(p)


class TestGradients:
    def test_poisson_closed_form(self):
        # alpha = 1: d1 = y - x, d2 = -x with x = exp(eta)
        p = GcParams(alpha=1.0, gamma_rate=1.0)
        for y, eta in [(0, 0.3), (3, math.log(2.0)), (10, 1.7)]:
            d1, d2 = gc_log_pmf_grad(p, y, eta)
            x = math.exp(eta)
            assert d1 == pytest.approx(y - x, rel=1e-10, abs=1e-10)
            assert d2 == pytest.approx(-x, rel=1e-10)

    def test_against_finite_differences(self):
        rng = np.random.default_rng(1234)
        worst1 = worst2 = 0.0
        for _ in range(100):
            alpha = float(rng.uniform(0.2, 5.0))
            y = int(rng.integers(0, 16))
            eta = float(rng.uniform(-2.0, 2.5))
            p = GcParams(alpha=alpha, gamma_rate=1.0)

            def logf(e):
                x = alpha * math.exp(e)
                return gc_log_pmf(GcParams(alpha=alpha, gamma_rate=x), y)

            d1, d2 = gc_log_pmf_grad(p, y, eta)
            f1 = fd_first(logf, eta)
            f2 = fd_second(logf, eta)
            worst1 = max(worst1, abs(d1 - f1) / max(abs(f1), 1.0))
            worst2 = max(worst2, abs(d2 - f2) / max(abs(f2), 1.0))
        assert worst1 <= 1e-5, worst1
        assert worst2 <= 1e-5, worst2

    def test_flat_likelihood_raises(self):
        p = GcParams(alpha=4.0, gamma_rate=1.0)
        with pytest.raises(FlatLikelihoodError):
            gc_log_pmf_grad(p, 40, -4.0)

    def test_vectorized_terms_match_scalar(self):
        alpha = 0.7
        y = np.array([0, 2, 5, 11])
        eta = np.array([0.1, 0.5, 1.0, 1.8])
        ll, d1, d2 = loglik_eta_terms(alpha, y, eta)
        for i in range(y.size):
            x = alpha * math.exp(eta[i])
            assert ll[i] == pytest.approx(
                gc_log_pmf(GcParams(alpha=alpha, gamma_rate=x), int(y[i])),
                rel=1e-13)
            s1, s2 = gc_log_pmf_grad(
                GcParams(alpha=alpha, gamma_rate=1.0), int(y[i]),
                float(eta[i]))
            assert d1[i] == pytest.approx(s1, rel=1e-13)
            assert d2[i] == pytest.approx(s2, rel=1e-13)

    def test_vectorized_terms_flag_underflow(self):
        alpha = 4.0
        y = np.array([1, 40])
        eta = np.array([0.0, -4.0])
        ll, d1, d2 = loglik_eta_terms(alpha, y, eta)
        assert np.isfinite(ll[0])
        assert ll[1] == -math.inf
        assert d1[1] == 0.0 and d2[1] == 0.0


class TestSampler:
    PAIRS = [(a, r) for a in (0.3, 0.7, 1.0, 2.0) for r in (0.5, 2.0, 8.0)]

    @pytest.mark.parametrize("alpha,rate", PAIRS)
    def test_total_variation(self, alpha, rate):
        n = 100_000
        p = GcParams(alpha=alpha, gamma_rate=rate)
        draws = gc_sample(p, rng_seed=hash((alpha, rate)) % (2 ** 31), n=n)
        hi = int(draws.max()) + 1
        emp = np.bincount(draws, minlength=hi + 1) / n
        ys = np.arange(emp.size)
        theo = gc_pmf(p, ys)
        tv = 0.5 * (np.abs(emp - theo).sum() + max(0.0, 1.0 - theo.sum()))
        assert tv < 0.01, (alpha, rate, tv)

    def test_deterministic_given_seed(self):
        p = GcParams(alpha=0.5, gamma_rate=1.7)
        a = gc_sample(p, rng_seed=5, n=50)
        b = gc_sample(p, rng_seed=5, n=50)
        assert np.array_equal(a, b)
        c = gc_sample(p, rng_seed=6, n=50)
        assert not np.array_equal(a, c)

    def test_heterogeneous_rates(self):
        rng = np.random.default_rng(3)
        rates = np.array([0.5, 2.0, 8.0])
        draws = sample_renewal_counts(2.0, np.tile(rates, 4000), rng)
        means = draws.reshape(-1, 3).mean(axis=0)
        for j, r in enumerate(rates):
            want = gc_mean(GcParams(alpha=2.0, gamma_rate=r))
            assert means[j] == pytest.approx(want, abs=0.05)

    def test_matches_naive_renewal_oracle(self):
        # distributional agreement with the scalar-loop oracle
        ours = gc_sample(GcParams(alpha=0.5, gamma_rate=2.0),
                         rng_seed=11, n=50_000)
        ref = mc_renewal_counts(0.5, 2.0, 1.0, 20_000, seed=12)
        hi = max(ours.max(), ref.max()) + 1
        po = np.bincount(ours, minlength=hi) / ours.size
        pr = np.bincount(ref, minlength=hi) / ref.size
        assert 0.5 * np.abs(po - pr).sum() < 0.02
