import math

import numpy as np
import pytest
from scipy import integrate, linalg, optimize, sparse, stats

from oracles import latent_integral, log_joint
from tailreg.errors import ConvergenceError
from tailreg.latent_effects import CyclicRW2Spec, MaternSpec, SiteSet, assemble_indexed
from tailreg.laplace_engine import (
    FreeHyper,
    HyperGrid,
    LatentGaussianModel,
    explore_grid,
    fit,
    hyper_axis_density,
    hyper_marginals,
    latent_marginals,
    log_post_hyper,
    newton_mode,
)
from tailreg.pc_priors import GammaPrior, PCPriorExp


def regression_model(family, y, design, prior_prec, **kw):
    prec = np.diag(prior_prec)
    return LatentGaussianModel(family, y, sparse.csr_matrix(design), lambda h: prec, **kw)


def bernoulli_data(seed, n=50, beta=(0.8, 1.5, -1.2)):
    rng = np.random.default_rng(seed)
    x = np.column_stack([np.ones(n)] + [rng.normal(size=n) for _ in range(len(beta) - 1)])
    y = (rng.random(n) < 1 / (1 + np.exp(-x @ np.asarray(beta)))).astype(float)
    return x, y


class TestNewton:
    def test_gaussian_is_one_step_gls(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(30, 3))
        y = x @ [1.0, -2.0, 0.5] + rng.normal(size=30)
        prior = np.array([0.1, 2.0, 5.0])
        tau = 3.0
        m = regression_model("gaussian", y, x, prior, hyper_fixed={"precision": tau})
        approx = newton_mode(m, {"precision": tau})
        gls = np.linalg.solve(np.diag(prior) + tau * x.T @ x, tau * x.T @ y)
        np.testing.assert_allclose(approx.mode_z, gls, rtol=1e-12, atol=1e-12)
        assert approx.n_iter == 1

    def test_single_bernoulli_datum(self):
        m = regression_model("bernoulli", [1.0], [[1.0]], [0.01])
        approx = newton_mode(m, {})
        assert approx.mode_z[0] > 0
        assert approx.grad_norm < 1e-8
        # Stationarity: y - logistic(x) = 0.01 x.
        x = approx.mode_z[0]
        assert 1 - 1 / (1 + math.exp(-x)) == pytest.approx(0.01 * x, abs=1e-12)

    def test_matches_nelder_mead(self):
        x, y = bernoulli_data(3)
        prior = np.array([0.5, 1.0, 1.0])
        m = regression_model("bernoulli", y, x, prior)
        approx = newton_mode(m, {})
        res = optimize.minimize(
            lambda v: -float(log_joint("bernoulli", y, x, 0.0, np.diag(prior), {}, v)[0]),
            np.zeros(3), method="Nelder-Mead",
            options={"xatol": 1e-9, "fatol": 1e-13, "maxiter": 20000, "maxfev": 40000})
        np.testing.assert_allclose(approx.mode_z, res.x, atol=1e-5)

    @pytest.mark.parametrize("family", ["bernoulli", "gamma", "gp"])
    def test_monotone_and_stationary(self, family):
        rng = np.random.default_rng(11)
        x = np.column_stack([np.ones(50), rng.normal(size=50)])
        if family == "bernoulli":
            y, hyper = (rng.random(50) < 0.6).astype(float), {}
        elif family == "gamma":
            y, hyper = rng.gamma(2.0, 3.0, 50), {"shape": 2.0}
        else:
            y, hyper = rng.pareto(3.0, 50) * 2, {"xi": 0.3}
        m = regression_model(family, y, x, [0.01, 1.0], hyper_fixed=hyper)
        approx = newton_mode(m, hyper, init=[3.0, -2.0])
        slack = 64 * np.finfo(float).eps * (1 + np.abs(approx.trace[:-1]))
        assert np.all(np.diff(approx.trace) >= -slack)
        assert approx.grad_norm < 1e-8
        assert approx.n_iter <= 100

    def test_non_convergence_carries_trace(self):
        x, y = bernoulli_data(1)
        m = regression_model("bernoulli", y, x, [0.01, 0.01, 0.01])
        with pytest.raises(ConvergenceError) as info:
            newton_mode(m, {}, max_iter=1, init=[5.0, -5.0, 5.0])
        assert len(info.value.trace) >= 1


def conjugate_setup(n_sites, n_obs, seed):
    rng = np.random.default_rng(seed)
    sites = SiteSet([f"s{i}" for i in range(n_sites)], rng.uniform(0, 300, (n_sites, 2)))
    site_index = rng.integers(0, n_sites, n_obs)
    week_index = rng.integers(0, 52, n_obs)
    structure = assemble_indexed(MaternSpec(80.0), CyclicRW2Spec(1.0), sites, site_index, week_index)
    y = rng.normal(2.0, 1.5, n_obs)
    return structure, y


def conjugate_model(structure, y, free=True):
    def precision(h):
        return structure.working_precision(h["tau_s"], h["tau_t"])

    if free:
        hyper_free = [FreeHyper("tau_s", GammaPrior(1.0, 1.0).logpdf_log),
                      FreeHyper("tau_t", GammaPrior(1.0, 0.1).logpdf_log)]
        fixed = {"precision": 2.0}
    else:
        hyper_free = []
        fixed = {"precision": 2.0, "tau_s": 1.7, "tau_t": 4.0}
    return LatentGaussianModel("gaussian", y, structure.obs_matrix, precision, basis=structure.basis,
                               hyper_fixed=fixed, hyper_free=hyper_free)


def constrained_covariance(structure, tau_s, tau_t):
    """Prior covariance on the sum-to-zero subspace, built without the working basis."""
    blocks = structure.precision_blocks(tau_s, tau_t)
    cov = linalg.block_diag(*[np.linalg.pinv(b, rcond=1e-10, hermitian=True) if i == 2 else np.linalg.inv(b)
                              for i, b in enumerate(blocks)])
    return cov


def closed_form(structure, y, tau_s, tau_t, noise_prec):
    a = structure.obs_matrix.toarray()
    cov = constrained_covariance(structure, tau_s, tau_t)
    s = a @ cov @ a.T + np.eye(len(y)) / noise_prec
    gain = cov @ a.T @ np.linalg.inv(s)
    mean = gain @ y
    post = cov - gain @ a @ cov
    loglik = stats.multivariate_normal(np.zeros(len(y)), s).logpdf(y)
    return mean, np.sqrt(np.diag(post)), loglik


@pytest.mark.parametrize("n_sites", [2, 40])
class TestConjugate:
    def test_posterior_moments(self, n_sites):
        structure, y = conjugate_setup(n_sites, 120, n_sites)
        assert structure.dim == 1 + n_sites + 52
        f = fit(conjugate_model(structure, y, free=False))
        mean, sd, _ = closed_form(structure, y, 1.7, 4.0, 2.0)
        np.testing.assert_allclose(f.latent.mean, mean, atol=1e-8)
        np.testing.assert_allclose(f.latent.sd, sd, atol=1e-8)
        assert abs(f.latent.mean[structure.weekly_slice].sum()) < 1e-8

    def test_marginal_likelihood(self, n_sites):
        structure, y = conjugate_setup(n_sites, 120, n_sites)
        m = conjugate_model(structure, y)
        for theta in ([0.0, 0.0], [0.7, -1.2], [-1.5, 2.0]):
            ts, tt = np.exp(theta)
            _, _, loglik = closed_form(structure, y, ts, tt, 2.0)
            assert log_post_hyper(m, theta) == pytest.approx(m.log_prior(theta) + loglik, abs=1e-8)


class TestGrid:
    def test_no_free_hyper_is_point_mass(self):
        x, y = bernoulli_data(2)
        m = regression_model("bernoulli", y, x, [0.1, 1.0, 1.0])
        grid = explore_grid(m)
        assert len(grid) == 1 and grid.weights[0] == 1.0
        approx = newton_mode(m, {})
        f = fit(m)
        np.testing.assert_array_equal(f.latent.mean, approx.mode_z)
        np.testing.assert_allclose(f.latent.sd, np.sqrt(np.diag(approx.covariance_z())), rtol=1e-12)

    def test_one_hyper_unimodal_and_closed(self):
        x, y = bernoulli_data(4)
        m = LatentGaussianModel("bernoulli", y, sparse.csr_matrix(x),
                                lambda h: np.diag([0.1, h["tau"], h["tau"]]),
                                hyper_free=[FreeHyper("tau", GammaPrior(1.0, 1.0).logpdf_log)])
        grid = explore_grid(m)
        assert grid.weights.sum() == pytest.approx(1.0, abs=1e-14)
        order = np.argsort(grid.offsets[:, 0])
        w = grid.weights[order]
        peak = int(np.argmax(w))
        assert np.all(np.diff(w[: peak + 1]) >= 0) and np.all(np.diff(w[peak:]) <= 0)
        lp = grid.log_post[order]
        assert lp.max() - lp[0] >= 6.0 and lp.max() - lp[-1] >= 6.0
        assert grid.edge_mass < 1e-3

    def test_cap(self):
        x, y = bernoulli_data(5)
        m = LatentGaussianModel("bernoulli", y, sparse.csr_matrix(x),
                                lambda h: np.diag([h["a"], h["b"], h["b"]]),
                                hyper_free=[FreeHyper("a", GammaPrior(1.0, 1.0).logpdf_log),
                                            FreeHyper("b", GammaPrior(1.0, 1.0).logpdf_log)])
        with pytest.raises(ConvergenceError):
            explore_grid(m, max_points=20)

    def test_xi_mean_against_dense_quadrature(self):
        rng = np.random.default_rng(21)
        xi_true, n = 0.3, 50
        y = 2.0 * ((rng.random(n)) ** (-xi_true) - 1) / xi_true
        prior = PCPriorExp(3.0)
        m = regression_model("gp", y, np.ones((n, 1)), [0.01],
                             hyper_free=[FreeHyper("xi", prior.logpdf_log, math.log(0.1))])
        f = fit(m)
        thetas = np.linspace(-7.0, 0.5, 301)
        logp = np.array([latent_integral("gp", y, np.ones((n, 1)), 0.0, np.array([[0.01]]),
                                         {"xi": math.exp(t)}, n_nodes=401, width=10.0)[0]
                         + prior.logpdf_log(t) for t in thetas])
        w = np.exp(logp - logp.max())
        oracle = integrate.trapezoid(np.exp(thetas) * w, thetas) / integrate.trapezoid(w, thetas)
        assert f.hyper.row("xi")["mean"] == pytest.approx(oracle, rel=0.01)


class TestMarginals:
    def _product_grid(self):
        ax = np.arange(-4, 5)
        offsets = np.array([(i, j) for i in ax for j in ax])
        pa = np.exp(-0.5 * (ax * 0.5) ** 2)
        pb = np.exp(-0.3 * (ax * 0.5 - 0.4) ** 2 - 0.1 * ax)
        w = np.array([pa[i + 4] * pb[j + 4] for i, j in offsets])
        w /= w.sum()
        k = len(offsets)
        grid = HyperGrid(names=["a", "b"], transforms=["log", "log"], center=np.array([0.1, -0.3]),
                         spacing=np.array([0.5, 0.5]), offsets=offsets,
                         points=np.array([0.1, -0.3]) + 0.5 * offsets, log_post=np.log(w), weights=w,
                         modes=np.zeros((k, 1)), variances=np.ones((k, 1)))
        return grid, pa / pa.sum(), pb / pb.sum()

    def test_product_grid_factorizes(self):
        grid, pa, pb = self._product_grid()
        for axis, marg in ((0, pa), (1, pb)):
            one = HyperGrid(names=["v"], transforms=["log"], center=grid.center[[axis]],
                            spacing=grid.spacing[[axis]], offsets=np.arange(-4, 5)[:, None],
                            points=grid.center[axis] + 0.5 * np.arange(-4, 5)[:, None],
                            log_post=np.log(marg), weights=marg, modes=np.zeros((9, 1)),
                            variances=np.ones((9, 1)))
            t2, d2 = hyper_axis_density(grid, axis)
            t1, d1 = hyper_axis_density(one, 0)
            np.testing.assert_allclose(t2, t1, rtol=1e-14)
            np.testing.assert_allclose(d2, d1, rtol=1e-10)

    def test_mixture_moments(self):
        grid, _, _ = self._product_grid()
        rng = np.random.default_rng(0)
        grid.modes = rng.normal(size=(len(grid), 2))
        grid.variances = rng.uniform(0.5, 2.0, (len(grid), 2))
        m = regression_model("gaussian", [0.0], [[1.0, 0.0]], [1.0, 1.0])
        summ = latent_marginals(m, grid)
        mean = grid.weights @ grid.modes
        var = grid.weights @ (grid.variances + grid.modes ** 2) - mean ** 2
        np.testing.assert_allclose(summ.mean, mean, rtol=1e-12)
        np.testing.assert_allclose(summ.sd, np.sqrt(var), rtol=1e-12)
        for j in range(2):
            for p, q in ((0.025, summ.lower[j]), (0.975, summ.upper[j])):
                cdf = grid.weights @ stats.norm.cdf(q, grid.modes[:, j], np.sqrt(grid.variances[:, j]))
                assert cdf == pytest.approx(p, abs=1e-10)
        assert np.all(summ.lower <= summ.mean) and np.all(summ.mean <= summ.upper)

    def test_hyper_summary_ordering(self):
        grid, _, _ = self._product_grid()
        m = regression_model("gaussian", [0.0], [[1.0]], [1.0],
                             hyper_free=[FreeHyper("a", lambda t: 0.0), FreeHyper("b", lambda t: 0.0)])
        summ = hyper_marginals(m, grid)
        assert np.all(summ.lower <= summ.mean) and np.all(summ.mean <= summ.upper)
        assert np.all(summ.sd > 0)


class TestInvariance:
    def test_offset_shift_preserves_ranking(self):
        rng = np.random.default_rng(7)
        n = 50
        x = np.column_stack([np.ones(n), rng.normal(size=n)])
        y = rng.gamma(3.0, np.exp(x @ [1.0, 0.4]) / 3.0)

        def model(offset):
            return LatentGaussianModel("gamma", y, sparse.csr_matrix(x),
                                       lambda h: np.diag([1e-6, h["tau"]]), offset=offset,
                                       hyper_fixed={"shape": 3.0},
                                       hyper_free=[FreeHyper("tau", GammaPrior(1.0, 1.0).logpdf_log)])

        thetas = np.linspace(-2, 3, 9)
        base = [log_post_hyper(model(0.0), [t]) for t in thetas]
        shifted = [log_post_hyper(model(0.8), [t]) for t in thetas]
        np.testing.assert_array_equal(np.argsort(base), np.argsort(shifted))
        m0 = newton_mode(model(0.0), {"shape": 3.0, "tau": 1.0})
        m1 = newton_mode(model(0.8), {"shape": 3.0, "tau": 1.0})
        assert m1.mode_z[0] - m0.mode_z[0] == pytest.approx(-0.8, abs=1e-4)
        assert m1.mode_z[1] == pytest.approx(m0.mode_z[1], abs=1e-4)

    def test_deterministic(self):
        x, y = bernoulli_data(9)
        def make():
            return LatentGaussianModel("bernoulli", y, sparse.csr_matrix(x),
                                       lambda h: np.diag([0.1, h["tau"], h["tau"]]),
                                       hyper_free=[FreeHyper("tau", GammaPrior(1.0, 1.0).logpdf_log)])
        f1, f2 = fit(make()), fit(make())
        assert f1.latent.mean.tobytes() == f2.latent.mean.tobytes()
        assert f1.hyper.sd.tobytes() == f2.hyper.sd.tobytes()
        assert f1.grid.weights.tobytes() == f2.grid.weights.tobytes()
