import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tailreg.errors import DomainError
from tailreg.tail_distributions import (
    BernoulliParam,
    GammaMeanShape,
    GPQuantileParam,
    GPScaleParam,
    convert_params,
    gamma_cdf,
    gamma_logpdf,
    gamma_quantile,
    gp_cdf,
    gp_quantile,
    gp_sample,
    gp_survival,
    predictor_derivs,
    to_quantile_param,
)


def bisect(f, lo, hi, tol=1e-15, iters=300):
    flo = f(lo)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
        if hi - lo < tol * max(1.0, abs(hi)):
            break
    return 0.5 * (lo + hi)


def lower_gamma_series(a, x, terms=2000):
    """Regularized lower incomplete gamma from its power series."""
    total, term = 0.0, 1.0 / a
    for n in range(terms):
        total += term
        term *= x / (a + n + 1)
        if term < 1e-18 * total:
            break
    return math.exp(a * math.log(x) - x - math.lgamma(a)) * total


def gp_cdf_direct(y, kappa, q, xi):
    # Written straight from the quantile-parametrized distribution function.
    if xi == 0:
        return 1 - (1 - q) ** (y / kappa)
    return 1 - max(1 + ((1 - q) ** (-xi) - 1) * y / kappa, 0.0) ** (-1 / xi)


class TestGPSurvival:
    def test_exponential_case(self):
        assert gp_survival(2.0, GPScaleParam(2.0, 0.0)) == pytest.approx(math.exp(-1), rel=1e-15)

    def test_origin(self):
        assert gp_survival(0.0, GPScaleParam(3.0, 0.7)) == 1.0

    def test_heavy_tail_value(self):
        assert gp_survival(1.0, GPScaleParam(1.0, 0.5)) == pytest.approx(1.5 ** -2, rel=1e-14)
        assert gp_survival(1.0, GPScaleParam(1.0, 0.5)) == pytest.approx(0.444444, abs=1e-6)

    def test_rejects_negative_y(self):
        with pytest.raises(DomainError):
            gp_survival(-1.0, GPScaleParam(1.0, 0.1))

    def test_rejects_bad_params(self):
        with pytest.raises(DomainError):
            GPScaleParam(0.0, 0.1)
        with pytest.raises(DomainError):
            GPScaleParam(1.0, -0.1)

    def test_continuity_at_zero(self):
        y = np.linspace(1e-3, 10.0, 500)
        near = gp_survival(y, GPScaleParam(1.0, 1e-9))
        assert np.max(np.abs(near - np.exp(-y))) < 1e-7

    def test_switch_is_consistent(self):
        y = np.linspace(0.0, 20.0, 200)
        below = gp_survival(y, GPScaleParam(1.3, 0.9e-8))
        above = gp_survival(y, GPScaleParam(1.3, 1.1e-8))
        assert np.max(np.abs(below - above)) < 1e-7

    @given(st.floats(0.01, 10), st.floats(0, 0.95))
    def test_monotone_and_bounded(self, sigma, xi):
        y = np.linspace(0, 50, 100)
        s = gp_survival(y, GPScaleParam(sigma, xi))
        assert np.all((s >= 0) & (s <= 1))
        assert np.all(np.diff(s) <= 0)
        assert np.all(np.diff(s[s > 1e-300]) < 0)

    def test_mean_identity(self):
        rng = np.random.default_rng(7)
        sigma, xi = 1.0, 0.3
        par = to_quantile_param(GPScaleParam(sigma, xi), 0.5)
        draws = gp_sample(rng, par, 10 ** 6)
        se = draws.std() / math.sqrt(draws.size)
        assert abs(draws.mean() - sigma / (1 - xi)) < 4 * se

    def test_mean_identity_half(self):
        # xi = 0.5 has infinite variance, so check the mean by integrating the survival function.
        from scipy import integrate
        val, _ = integrate.quad(lambda y: gp_survival(y, GPScaleParam(2.0, 0.5)), 0, np.inf)
        assert val == pytest.approx(2.0 / 0.5, rel=1e-8)


class TestGPQuantile:
    def test_defining_property(self):
        par = GPQuantileParam(1.7, 0.5, 0.34)
        assert gp_quantile(0.5, par) == 1.7

    def test_median_exponential(self):
        assert gp_quantile(0.5, GPQuantileParam(2.0, 0.5, 0.0)) == pytest.approx(2.0, rel=1e-15)

    def test_against_bisection(self):
        par = GPQuantileParam(1.0, 0.5, 0.34)
        y = gp_quantile(0.9, par)
        oracle = bisect(lambda v: gp_cdf_direct(v, 1.0, 0.5, 0.34) - 0.9, 0.0, 100.0)
        assert y == pytest.approx(oracle, rel=1e-12)
        assert gp_cdf_direct(y, 1.0, 0.5, 0.34) == pytest.approx(0.9, abs=1e-10)

    def test_domain(self):
        par = GPQuantileParam(1.0, 0.5, 0.1)
        for bad in (0.0, 1.0, -0.1, 1.5):
            with pytest.raises(DomainError):
                gp_quantile(bad, par)

    @settings(max_examples=200)
    @given(st.floats(0.01, 100), st.floats(0.01, 0.99), st.floats(0, 0.95), st.floats(1e-6, 1 - 1e-6))
    def test_coherence(self, kappa, q, xi, alpha):
        par = GPQuantileParam(kappa, q, xi)
        assert gp_quantile(q, par) == pytest.approx(kappa, rel=1e-12)
        y = gp_quantile(alpha, par)
        surv = gp_survival(y, convert_params(par))
        assert surv == pytest.approx(1 - alpha, abs=1e-9)


class TestConvert:
    def test_unit_exponential(self):
        sc = convert_params(GPQuantileParam(1.0, 1 - math.exp(-1), 0.0))
        assert sc.sigma == pytest.approx(1.0, rel=1e-14)

    def test_half_tail(self):
        sc = convert_params(GPQuantileParam(1.0, 0.5, 0.5))
        assert sc.sigma == pytest.approx(0.5 / (0.5 ** -0.5 - 1), rel=1e-14)
        assert sc.sigma == pytest.approx(1.207107, abs=1e-6)
        # Survival under the converted scale matches the quantile form.
        y = np.linspace(0, 30, 50)
        direct = np.array([1 - gp_cdf_direct(v, 1.0, 0.5, 0.5) for v in y])
        np.testing.assert_allclose(gp_survival(y, sc), direct, rtol=1e-12)

    def test_round_trip_grid(self):
        rng = np.random.default_rng(3)
        for kappa, xi in zip(rng.uniform(0.01, 50, 100), rng.uniform(0, 0.99, 100)):
            par = GPQuantileParam(kappa, 0.5, xi)
            back = to_quantile_param(convert_params(par), 0.5)
            assert back.kappa_q == pytest.approx(kappa, rel=1e-12)
            assert back.xi == xi

    @given(st.floats(0.1, 10), st.floats(0.05, 0.95), st.one_of(st.just(0.0), st.floats(1e-3, 0.9)))
    def test_survival_matches_quantile_form(self, kappa, q, xi):
        par = GPQuantileParam(kappa, q, xi)
        y = np.linspace(0, 10 * kappa, 25)
        direct = np.array([1 - gp_cdf_direct(v, kappa, q, xi) for v in y])
        np.testing.assert_allclose(1 - gp_cdf(y, par), direct, rtol=1e-11, atol=1e-300)


class TestGamma:
    def test_unit_exponential(self):
        assert gamma_logpdf(1.0, GammaMeanShape(1.0, 1.0)) == pytest.approx(-1.0, abs=1e-15)

    def test_against_lgamma(self):
        k, mu, y = 3.0, 2.0, 2.0
        oracle = k * math.log(k / mu) - math.lgamma(k) + (k - 1) * math.log(y) - k * y / mu
        assert gamma_logpdf(y, GammaMeanShape(mu, k)) == pytest.approx(oracle, rel=1e-14)
        assert oracle == pytest.approx(-1.0904575, abs=1e-7)

    def test_monte_carlo_mean(self):
        rng = np.random.default_rng(11)
        mu, k = 2.0, 3.0
        draws = rng.gamma(k, mu / k, 10 ** 6)
        assert abs(draws.mean() - mu) < 0.01

    def test_domain(self):
        with pytest.raises(DomainError):
            gamma_logpdf(0.0, GammaMeanShape(1.0, 1.0))
        with pytest.raises(DomainError):
            GammaMeanShape(-1.0, 1.0)

    @pytest.mark.parametrize("p", [0.5, 0.9, 0.92, 0.99])
    def test_quantile_exponential(self, p):
        assert gamma_quantile(p, GammaMeanShape(1.7, 1.0)) == pytest.approx(-1.7 * math.log(1 - p), rel=1e-11)

    @pytest.mark.parametrize("p", [0.90, 0.92, 0.99])
    @pytest.mark.parametrize("mu,k", [(1.0, 2.0), (0.3, 0.6), (5.0, 12.0)])
    def test_quantile_round_trip(self, p, mu, k):
        par = GammaMeanShape(mu, k)
        assert gamma_cdf(gamma_quantile(p, par), par) == pytest.approx(p, abs=1e-9)

    def test_quantile_against_series_oracle(self):
        # p = 0.92, mu = 1, k = 2: standardized v = 2y solves P(2, v) = 0.92.
        v = bisect(lambda x: lower_gamma_series(2.0, x) - 0.92, 1e-6, 50.0)
        oracle = v / 2.0
        assert gamma_quantile(0.92, GammaMeanShape(1.0, 2.0)) == pytest.approx(oracle, rel=1e-10)
        assert oracle == pytest.approx(2.084133, abs=1e-6)

    def test_quantile_domain(self):
        with pytest.raises(DomainError):
            gamma_quantile(1.0, GammaMeanShape(1.0, 1.0))


def test_bernoulli_param():
    assert BernoulliParam(0.3).p == 0.3
    with pytest.raises(DomainError):
        BernoulliParam(1.0)


class TestPredictorDerivs:
    def test_bernoulli_at_zero(self):
        d = predictor_derivs(1.0, "bernoulli", 0.0)
        assert float(d.loglik) == pytest.approx(math.log(0.5), rel=1e-15)
        assert float(d.d1) == pytest.approx(0.5)
        assert float(d.d2) == pytest.approx(-0.25)

    @pytest.mark.parametrize("k", [0.3, 1.0, 4.0])
    def test_gamma_stationary_at_mean(self, k):
        y = 2.7
        d = predictor_derivs(y, "gamma", math.log(y), {"shape": k})
        assert abs(float(d.d1)) < 1e-14

    def test_gamma_loglik_matches_density(self):
        y, eta, k = 1.3, 0.4, 2.5
        d = predictor_derivs(y, "gamma", eta, {"shape": k})
        assert float(d.loglik) == pytest.approx(gamma_logpdf(y, GammaMeanShape(math.exp(eta), k)), rel=1e-13)

    def test_gp_loglik_matches_density(self):
        from tailreg.tail_distributions import gp_logpdf
        y, eta, xi = 0.8, -0.2, 0.34
        d = predictor_derivs(y, "gp", eta, {"xi": xi, "q": 0.5}, offset=0.1)
        par = convert_params(GPQuantileParam(math.exp(-0.1), 0.5, xi))
        assert float(d.loglik) == pytest.approx(gp_logpdf(y, par), rel=1e-13)

    def test_gp_offset_shift(self):
        d1 = predictor_derivs(0.5, "gp", 0.3, {"xi": 0.2}, offset=0.0)
        d2 = predictor_derivs(0.5, "gp", 0.0, {"xi": 0.2}, offset=0.3)
        assert float(d1.loglik) == float(d2.loglik)

    @staticmethod
    def _fd_check(family, y, eta, hyper, offset=0.0, step=1e-5):
        base = predictor_derivs(y, family, eta, hyper, offset)
        up = predictor_derivs(y, family, eta + step, hyper, offset)
        dn = predictor_derivs(y, family, eta - step, hyper, offset)
        fd1 = (up.loglik - dn.loglik) / (2 * step)
        fd2 = (up.d1 - dn.d1) / (2 * step)
        return base, fd1, fd2

    @pytest.mark.parametrize("family", ["gamma", "bernoulli", "gp"])
    def test_finite_differences(self, family):
        rng = np.random.default_rng(5)
        n = 2000
        eta = rng.uniform(-3, 3, n)
        if family == "gamma":
            y, hyper = rng.gamma(2.0, 1.0, n), {"shape": 1.7}
        elif family == "bernoulli":
            y, hyper = (rng.random(n) < 0.3).astype(float), {}
        else:
            y, hyper = rng.exponential(1.0, n), {"xi": 0.34, "q": 0.5}
        base, fd1, fd2 = self._fd_check(family, y, eta, hyper)
        np.testing.assert_allclose(base.d1, fd1, rtol=1e-5, atol=1e-7)
        np.testing.assert_allclose(base.d2, fd2, rtol=1e-5, atol=1e-7)

    def test_gp_log_concave_grid(self):
        rng = np.random.default_rng(9)
        for xi in rng.uniform(0, 1, 100):
            y = rng.exponential(2.0, 100)
            eta = rng.uniform(-10, 10, 100)
            d = predictor_derivs(y, "gp", eta, {"xi": xi})
            assert np.all(d.d2 <= 0)

    def test_gp_tiny_xi_matches_exponential_branch(self):
        y = np.linspace(0.01, 5, 50)
        a = predictor_derivs(y, "gp", 0.2, {"xi": 0.0})
        b = predictor_derivs(y, "gp", 0.2, {"xi": 1e-9})
        np.testing.assert_allclose(a.loglik, b.loglik, rtol=1e-7)
        np.testing.assert_allclose(a.d1, b.d1, rtol=1e-7, atol=1e-12)
        np.testing.assert_allclose(a.d2, b.d2, rtol=1e-7)

    def test_clamp_counter(self):
        d = predictor_derivs(np.array([1.0, 0.0, 1.0]), "bernoulli", np.array([0.0, 100.0, -45.0]))
        assert d.n_clamped == 2
        assert np.all(np.isfinite(d.loglik))

    def test_unknown_family(self):
        with pytest.raises(DomainError):
            predictor_derivs(1.0, "poisson", 0.0)
