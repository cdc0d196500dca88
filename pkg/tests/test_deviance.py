import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from nmfgen.deviance import (
    SupportError,
    UnsupportedDensityError,
    divergence,
    log_likelihood,
    negbin_divergence,
    negbin_log_likelihood,
    negbin_logpmf,
    poisson_log_likelihood,
    tweedie_divergence,
    tweedie_log_density,
    unit_deviance,
)
from nmfgen.model import CostModel

POWERS = [0.0, 1.0, 1.2, 1.5, 1.8, 2.0, 2.5, 3.0]


def naive_deviance(x, mu, p):
    """Textbook form of the unit deviance, evaluated term by term."""
    if p == 0:
        return (x - mu) ** 2
    if p == 1:
        return 2 * ((x * math.log(x / mu) if x > 0 else 0.0) - x + mu)
    if p == 2:
        return 2 * (x / mu - math.log(x / mu) - 1)
    return 2 * (x ** (2 - p) / ((1 - p) * (2 - p)) - x * mu ** (1 - p) / (1 - p) + mu ** (2 - p) / (2 - p))


def cp_density_oracle(x, mu, p, s2, terms=400):
    """Compound Poisson density as a Poisson mixture of Gamma densities."""
    lam = mu ** (2 - p) / (s2 * (2 - p))
    shape = (2 - p) / (p - 1)
    scale = s2 * (p - 1) * mu ** (p - 1)
    n = np.arange(1, terms)
    return float(np.sum(stats.poisson.pmf(n, lam) * stats.gamma.pdf(x, n * shape, scale=scale)))


class TestUnitDeviance:
    def test_squared_error(self):
        assert unit_deviance(3.0, 1.0, 0) == 4.0

    def test_zero_at_equality(self):
        assert unit_deviance(5.0, 5.0, 1) == 0.0

    def test_p_one_point_five(self):
        assert unit_deviance(2.0, 1.0, 1.5) == pytest.approx(0.686292, abs=5e-7)
        assert unit_deviance(2.0, 1.0, 1.5) == pytest.approx(naive_deviance(2.0, 1.0, 1.5), rel=1e-12)

    def test_zero_observation_poisson(self):
        assert unit_deviance(0.0, 3.0, 1) == 6.0

    def test_zero_observation_general(self):
        assert unit_deviance(0.0, 2.0, 1.5) == pytest.approx(2 * 2 ** 0.5 / 0.5, rel=1e-14)

    @pytest.mark.parametrize("p", [1.0, 1.5, 2.0, 2.5, 3.0])
    @pytest.mark.parametrize("x,mu", [(2.0, 1.0), (0.3, 4.0), (7.0, 7.5), (100.0, 3.0)])
    def test_matches_naive_form(self, p, x, mu):
        assert unit_deviance(x, mu, p) == pytest.approx(naive_deviance(x, mu, p), rel=1e-10)

    @pytest.mark.parametrize("p", [1 + 1e-9, 2 - 1e-9])
    def test_continuous_at_special_powers(self, p):
        near = round(p)
        assert unit_deviance(2.0, 1.0, p) == pytest.approx(unit_deviance(2.0, 1.0, near), rel=1e-7)

    def test_broadcasts(self):
        d = unit_deviance(np.array([1.0, 2.0, 3.0]), 2.0, 1)
        assert d.shape == (3,) and d[1] == 0

    def test_support(self):
        with pytest.raises(SupportError):
            unit_deviance(1.0, 0.0, 1)
        with pytest.raises(SupportError):
            unit_deviance(-1.0, 1.0, 1.5)
        with pytest.raises(SupportError):
            unit_deviance(0.0, 1.0, 2)
        assert unit_deviance(-1.0, 2.0, 0) == 9.0

    def test_forbidden_power(self):
        with pytest.raises(ValueError):
            unit_deviance(1.0, 1.0, 0.5)

    @settings(max_examples=300, deadline=None)
    @given(
        p=st.sampled_from(POWERS),
        x=st.floats(0.0, 1e6),
        mu=st.floats(1e-6, 1e6),
    )
    def test_nonnegative_and_zero_only_at_equality(self, p, x, mu):
        if p >= 2 and x == 0:
            return
        d = unit_deviance(x, mu, p)
        assert d >= 0
        if x == mu:
            assert d == pytest.approx(0.0, abs=1e-9 * max(1.0, mu ** (2 - p) if p < 2 else 1.0))
        elif abs(x - mu) > 1e-3 * mu:
            assert d > 0


class TestTweedieDivergence:
    def test_zero_at_equality(self):
        v = np.array([[1.0, 2.0], [3.0, 4.0]])
        for p in POWERS:
            assert tweedie_divergence(v, v, p) == pytest.approx(0.0, abs=1e-12)

    def test_squared_error_sum(self):
        assert tweedie_divergence(np.array([[1.0, 2.0]]), np.array([[2.0, 2.0]]), 0) == 1.0

    @pytest.mark.parametrize("p", POWERS)
    def test_matches_scalar_sum(self, p):
        rng = np.random.default_rng(3)
        v = rng.uniform(0.5, 5, (2, 2))
        vhat = rng.uniform(0.5, 5, (2, 2))
        expected = sum(naive_deviance(a, b, p) for a, b in zip(v.ravel(), vhat.ravel()))
        assert tweedie_divergence(v, vhat, p) == pytest.approx(expected, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            tweedie_divergence(np.ones((2, 2)), np.ones((2, 3)), 1)

    def test_dispatch(self):
        rng = np.random.default_rng(0)
        v, vhat = rng.poisson(3, (4, 5)).astype(float), rng.uniform(1, 4, (4, 5))
        assert divergence(v, vhat, CostModel.tweedie(1.3)) == tweedie_divergence(v, vhat, 1.3)
        assert divergence(v, vhat, CostModel.negbin(2.0)) == negbin_divergence(v, vhat, 2.0)


class TestTweedieDensity:
    def test_normal_at_mean(self):
        assert tweedie_log_density(1.0, 1.0, 0, 1.0) == pytest.approx(-0.918939, abs=1e-6)
        assert tweedie_log_density(1.0, 1.0, 0, 1.0) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)

    def test_poisson_value(self):
        expected = 3 * math.log(2) - 2 - math.log(6)
        assert tweedie_log_density(3.0, 2.0, 1, 1.0) == pytest.approx(expected, abs=1e-12)
        assert tweedie_log_density(3.0, 2.0, 1, 1.0) == pytest.approx(-1.712318, abs=1e-6)

    def test_compound_poisson_zero_mass(self):
        assert tweedie_log_density(0.0, 1.0, 1.5, 1.0) == pytest.approx(-2.0, abs=1e-12)

    def test_scaled_poisson_requires_lattice(self):
        assert tweedie_log_density(4.0, 2.0, 1, 2.0) == pytest.approx(stats.poisson.logpmf(2, 1.0), abs=1e-12)
        with pytest.raises(SupportError):
            tweedie_log_density(1.5, 2.0, 1, 1.0)

    @pytest.mark.parametrize("mu,s2", [(1.0, 1.0), (3.0, 0.5), (0.5, 2.0)])
    def test_gamma(self, mu, s2):
        x = np.array([0.1, 0.7, 2.0, 5.0])
        expected = stats.gamma.logpdf(x, 1 / s2, scale=mu * s2)
        np.testing.assert_allclose(tweedie_log_density(x, mu, 2, s2), expected, rtol=1e-11)

    @pytest.mark.parametrize("mu,s2", [(1.0, 1.0), (2.0, 0.3)])
    def test_inverse_gaussian(self, mu, s2):
        x = np.array([0.2, 1.0, 3.0])
        lam = 1 / s2
        expected = stats.invgauss.logpdf(x, mu / lam, scale=lam)
        np.testing.assert_allclose(tweedie_log_density(x, mu, 3, s2), expected, rtol=1e-11)

    @pytest.mark.parametrize("p", [1.1, 1.5, 1.9])
    @pytest.mark.parametrize("mu,s2", [(1.0, 1.0), (5.0, 0.5), (0.3, 2.0)])
    def test_compound_poisson_matches_mixture(self, p, mu, s2):
        x = np.array([0.05, 0.5, 1.0, 2.5, 6.0])
        got = tweedie_log_density(x, mu, p, s2)
        expected = np.log([cp_density_oracle(xi, mu, p, s2) for xi in x])
        np.testing.assert_allclose(got, expected, rtol=1e-8)

    @pytest.mark.parametrize("mu,s2", [(1.0, 1.0), (4.0, 0.5)])
    def test_compound_poisson_total_mass(self, mu, s2):
        atom = math.exp(tweedie_log_density(0.0, mu, 1.5, s2))

        def f(x):
            return math.exp(tweedie_log_density(x, mu, 1.5, s2))

        upper = 60 * mu + 60
        cont = sum(integrate.quad(f, a, b, limit=200, epsabs=1e-12)[0]
                   for a, b in [(0, 1e-3), (1e-3, mu), (mu, upper)])
        assert atom + cont == pytest.approx(1.0, abs=1e-6)

    def test_unsupported_power(self):
        with pytest.raises(UnsupportedDensityError):
            tweedie_log_density(1.0, 1.0, 2.5, 1.0)

    def test_bad_sigma2(self):
        with pytest.raises(ValueError):
            tweedie_log_density(1.0, 1.0, 0, 0.0)

    def test_matrix_log_likelihood(self):
        v = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert log_likelihood(v, v, CostModel.normal(1.0)) == pytest.approx(4 * -0.918939, abs=1e-5)

    def test_poisson_log_likelihood_entrywise(self):
        rng = np.random.default_rng(1)
        v = rng.poisson(4, (3, 4)).astype(float)
        vhat = rng.uniform(1, 6, (3, 4))
        expected = sum(tweedie_log_density(a, b, 1, 1.0) for a, b in zip(v.ravel(), vhat.ravel()))
        assert poisson_log_likelihood(v, vhat) == pytest.approx(expected, rel=1e-12)
        assert poisson_log_likelihood(v, vhat) == pytest.approx(stats.poisson.logpmf(v, vhat).sum(), rel=1e-12)


class TestNegBin:
    def test_zero_at_equality(self):
        v = np.array([[1.0, 5.0], [2.0, 9.0]])
        assert negbin_divergence(v, v, 3.0) == pytest.approx(0.0, abs=1e-12)

    def test_scalar_value(self):
        expected = 2 * math.log(2) - 3 * math.log(1.5)
        assert negbin_divergence(np.array([[2.0]]), np.array([[1.0]]), 1.0) == pytest.approx(expected, rel=1e-12)
        assert expected == pytest.approx(0.169899, abs=1e-6)

    def test_poisson_limit(self):
        rng = np.random.default_rng(2)
        v = rng.poisson(5, (6, 5)).astype(float)
        vhat = rng.uniform(2, 8, (6, 5))
        nb = negbin_divergence(v, vhat, 1e8)
        assert nb == pytest.approx(tweedie_divergence(v, vhat, 1) / 2, rel=1e-4)

    def test_pmf_at_zero(self):
        assert negbin_logpmf(0.0, 1.0, 1.0) == pytest.approx(-math.log(2), abs=1e-12)

    def test_matrix_sum_of_scalar_pmfs(self):
        rng = np.random.default_rng(4)
        v = rng.integers(0, 12, (3, 3)).astype(float)
        vhat = rng.uniform(0.5, 9, (3, 3))
        alpha = 2.7
        expected = sum(stats.nbinom.logpmf(x, alpha, alpha / (alpha + m)) for x, m in zip(v.ravel(), vhat.ravel()))
        assert negbin_log_likelihood(v, vhat, alpha) == pytest.approx(expected, abs=1e-10)

    def test_large_counts_fallback_path(self):
        x = np.array([0.0, 3.0, 2_000_000.0])
        np.testing.assert_allclose(negbin_logpmf(x, 1.5e6, 4.0),
                                   stats.nbinom.logpmf(x, 4.0, 4.0 / (4.0 + 1.5e6)), rtol=1e-9)

    def test_per_row_alpha(self):
        v = np.array([[1.0, 2.0], [3.0, 0.0]])
        vhat = np.array([[1.5, 1.5], [2.0, 1.0]])
        a = np.array([1.0, 4.0])
        expected = negbin_log_likelihood(v[:1], vhat[:1], 1.0) + negbin_log_likelihood(v[1:], vhat[1:], 4.0)
        assert negbin_log_likelihood(v, vhat, a) == pytest.approx(expected, rel=1e-12)

    def test_mle_at_observation(self):
        v = np.array([[1.0, 4.0, 7.0]])
        best = negbin_log_likelihood(v, v, 2.0)
        rng = np.random.default_rng(0)
        for _ in range(20):
            other = v * rng.uniform(0.5, 1.5, v.shape)
            assert negbin_log_likelihood(v, other, 2.0) <= best + 1e-12

    def test_counts_required(self):
        with pytest.raises(SupportError):
            negbin_logpmf(1.5, 1.0, 1.0)

    def test_dispatch(self):
        v = np.array([[1.0, 2.0]])
        vhat = np.array([[1.5, 1.5]])
        assert log_likelihood(v, vhat, CostModel.negbin(3.0)) == negbin_log_likelihood(v, vhat, 3.0)

    @settings(max_examples=200, deadline=None)
    @given(x=st.integers(0, 10_000), mu=st.floats(1e-3, 1e4), alpha=st.floats(1e-3, 1e6))
    def test_divergence_nonnegative(self, x, mu, alpha):
        assert negbin_divergence(np.array([[float(x)]]), np.array([[mu]]), alpha) >= -1e-9 * max(1.0, x)
