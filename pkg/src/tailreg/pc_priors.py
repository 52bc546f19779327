"""Penalized-complexity priors for the GP tail index and the other hyperparameter priors.

The tail-index priors penalize the distance ``d(xi) = sqrt(2 KLD)`` between a
GP law and its exponential base model at a constant rate. Two forms exist:
the exact one built on ``KLD = xi^2 / (1 - xi)`` (support ``[0, 1)``) and the
exponential one built on the small-``xi`` approximation ``KLD ~ xi^2``.

Every prior exposes ``logpdf_log(theta)``: the log density of
``theta = log(x)``, Jacobian included, which is the scale the Laplace engine
explores.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special

from .errors import ConvergenceError, DomainError

SQRT2 = math.sqrt(2.0)


def _check_xi(xi):
    xi_arr = np.asarray(xi, dtype=float)
    if np.any(xi_arr < 0) or np.any(xi_arr >= 1):
        raise DomainError("tail index must lie in [0, 1)")
    return xi_arr


def kld_gp_exp(xi):
    """Kullback-Leibler divergence from GP(sigma, xi) to Exp(sigma).

    Independent of sigma. Diverges as xi -> 1.
    """
    xi_arr = _check_xi(xi)
    out = xi_arr * xi_arr / (1.0 - xi_arr)
    return float(out) if np.ndim(xi) == 0 else out


def pc_distance(xi):
    xi_arr = _check_xi(xi)
    out = SQRT2 * xi_arr / np.sqrt(1.0 - xi_arr)
    return float(out) if np.ndim(xi) == 0 else out


def pc_distance_deriv(xi):
    """d/dxi of :func:`pc_distance`; the Jacobian factor in the exact prior."""
    xi_arr = _check_xi(xi)
    out = SQRT2 * (1.0 - 0.5 * xi_arr) * (1.0 - xi_arr) ** -1.5
    return float(out) if np.ndim(xi) == 0 else out


@dataclass(frozen=True)
class PCPriorExact:
    """Exact-KLD PC prior on xi, supported on [0, 1).

    ``lam`` is the penalization rate on the distance scale; the density at
    zero is ``rate = sqrt(2) * lam``.
    """

    lam: float

    def __post_init__(self):
        if not self.lam > 0:
            raise DomainError(f"penalization rate must be positive, got {self.lam}")

    @property
    def rate(self) -> float:
        return SQRT2 * self.lam

    def logpdf(self, xi):
        xi_arr = np.asarray(xi, dtype=float)
        inside = (xi_arr >= 0) & (xi_arr < 1)
        x = np.where(inside, xi_arr, 0.0)
        val = (math.log(self.rate) - self.rate * x / np.sqrt(1.0 - x)
               + np.log1p(-0.5 * x) - 1.5 * np.log1p(-x))
        out = np.where(inside, val, -np.inf)
        return float(out) if np.ndim(xi) == 0 else out

    def pdf(self, xi):
        return np.exp(self.logpdf(xi))

    def tail_prob(self, xi0: float) -> float:
        """Pr(xi > xi0); closed form because the density is a pushed-forward exponential."""
        if xi0 <= 0:
            return 1.0
        if xi0 >= 1:
            return 0.0
        return math.exp(-self.rate * xi0 / math.sqrt(1.0 - xi0))

    def logpdf_log(self, theta):
        theta = np.asarray(theta, dtype=float)
        return self.logpdf(np.exp(theta)) + theta


@dataclass(frozen=True)
class PCPriorExp:
    """Exponential approximation of the PC prior on xi, with rate ``rate``."""

    rate: float

    def __post_init__(self):
        if not self.rate > 0:
            raise DomainError(f"rate must be positive, got {self.rate}")

    @property
    def lam(self) -> float:
        return self.rate / SQRT2

    def logpdf(self, xi):
        xi_arr = np.asarray(xi, dtype=float)
        out = np.where(xi_arr >= 0, math.log(self.rate) - self.rate * xi_arr, -np.inf)
        return float(out) if np.ndim(xi) == 0 else out

    def pdf(self, xi):
        return np.exp(self.logpdf(xi))

    def tail_prob(self, xi0: float) -> float:
        return 1.0 if xi0 <= 0 else math.exp(-self.rate * xi0)

    def logpdf_log(self, theta):
        theta = np.asarray(theta, dtype=float)
        return self.logpdf(np.exp(theta)) + theta


def pdf_exact(xi, prior: PCPriorExact):
    return prior.pdf(xi)


def pdf_exp(xi, prior: PCPriorExp):
    return prior.pdf(xi)


def elicit_rate(xi0: float, p0: float, form: str = "exp", *, tol: float = 1e-12) -> float:
    """Rate (density at zero) such that Pr(xi > xi0) = p0 under the chosen form."""
    if not 0 < p0 < 1:
        raise DomainError(f"p0 must lie in (0, 1), got {p0}")
    if form == "exact":
        if not 0 < xi0 < 1:
            raise DomainError("exact form needs 0 < xi0 < 1")

        def tail(rate):
            return PCPriorExact(rate / SQRT2).tail_prob(xi0)
    elif form == "exp":
        if not xi0 > 0:
            raise DomainError("exp form needs xi0 > 0")

        def tail(rate):
            return PCPriorExp(rate).tail_prob(xi0)
    else:
        raise DomainError(f"unknown prior form {form!r}")

    # tail() decreases in the rate; solve on the log scale for a clean bracket.
    def f(log_rate):
        return math.log(tail(math.exp(log_rate))) - math.log(p0)

    lo, hi = -1.0, 1.0
    for _ in range(200):
        if f(lo) > 0:
            break
        lo -= 2.0
    for _ in range(200):
        if f(hi) < 0:
            break
        hi += 2.0
    if not (f(lo) > 0 > f(hi)):
        raise ConvergenceError("could not bracket the elicited rate")
    root, info = optimize.brentq(f, lo, hi, xtol=tol, rtol=4 * np.finfo(float).eps,
                                 full_output=True)
    if not info.converged:
        raise ConvergenceError(f"rate elicitation did not converge: {info.flag}")
    return math.exp(root)


@dataclass(frozen=True)
class GammaPrior:
    """Gamma(shape, rate) prior on a positive hyperparameter."""

    shape: float
    rate: float

    def __post_init__(self):
        if not (self.shape > 0 and self.rate > 0):
            raise DomainError("Gamma prior needs positive shape and rate")

    @property
    def mean(self) -> float:
        return self.shape / self.rate

    @property
    def mode(self) -> float:
        return max(self.shape - 1.0, 0.0) / self.rate

    def logpdf(self, x):
        x_arr = np.asarray(x, dtype=float)
        safe = np.where(x_arr > 0, x_arr, 1.0)
        val = (self.shape * math.log(self.rate) - special.gammaln(self.shape)
               + (self.shape - 1.0) * np.log(safe) - self.rate * safe)
        out = np.where(x_arr > 0, val, -np.inf)
        return float(out) if np.ndim(x) == 0 else out

    def logpdf_log(self, theta):
        theta = np.asarray(theta, dtype=float)
        out = (self.shape * math.log(self.rate) - special.gammaln(self.shape)
               + self.shape * theta - self.rate * np.exp(theta))
        return float(out) if out.ndim == 0 else out

    def sample(self, rng: np.random.Generator, size=None):
        return rng.gamma(self.shape, 1.0 / self.rate, size)


@dataclass(frozen=True)
class PrecisionPrior(GammaPrior):
    """Log-gamma prior on a precision: Gamma(shape, inverse_scale) on tau."""

    shape: float = 1.0
    rate: float = 5e-5

    @property
    def inverse_scale(self) -> float:
        return self.rate


def gamma_shape_prior() -> GammaPrior:
    """Prior on the Gamma likelihood's shape k: shape 2, mean 1."""
    return GammaPrior(shape=2.0, rate=2.0)


@dataclass(frozen=True)
class GaussianPrior:
    mean: float = 0.0
    variance: float = 1000.0

    @property
    def precision(self) -> float:
        return 1.0 / self.variance

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        out = -0.5 * np.log(2 * math.pi * self.variance) - 0.5 * (x - self.mean) ** 2 / self.variance
        return float(out) if out.ndim == 0 else out


def xi_prior(form: str = "exp", rate: float = 15.0):
    """Tail-index prior from a config form tag and a rate (density at zero)."""
    if form == "exp":
        return PCPriorExp(rate)
    if form == "exact":
        return PCPriorExact(rate / SQRT2)
    raise DomainError(f"unknown prior form {form!r}")
