"""Response laws: generalized Pareto, Gamma (mean-shape) and Bernoulli.

Besides densities, tails and quantiles, :func:`predictor_derivs` returns the
log-likelihood and its first two derivatives with respect to the linear
predictor, which is what the Laplace engine consumes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy import optimize, special

from .errors import ConvergenceError, DomainError

# Below this tail index the xi -> 0 expansions are used.
XI_SMALL = 1e-8
ETA_CLAMP = 40.0

FAMILIES = ("gamma", "bernoulli", "gp", "gaussian")


@dataclass(frozen=True)
class GPScaleParam:
    sigma: float
    xi: float

    def __post_init__(self):
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise DomainError(f"GP scale must be positive, got {self.sigma}")
        if not (self.xi >= 0 and math.isfinite(self.xi)):
            raise DomainError(f"tail index must be >= 0, got {self.xi}")


@dataclass(frozen=True)
class GPQuantileParam:
    """GP law indexed by its ``q``-quantile ``kappa_q`` and tail index ``xi``."""

    kappa_q: float
    q: float
    xi: float

    def __post_init__(self):
        if not (self.kappa_q > 0 and math.isfinite(self.kappa_q)):
            raise DomainError(f"kappa_q must be positive, got {self.kappa_q}")
        if not 0 < self.q < 1:
            raise DomainError(f"q must lie in (0, 1), got {self.q}")
        if not (self.xi >= 0 and math.isfinite(self.xi)):
            raise DomainError(f"tail index must be >= 0, got {self.xi}")


@dataclass(frozen=True)
class GammaMeanShape:
    mu: float
    k: float

    def __post_init__(self):
        if not (self.mu > 0 and math.isfinite(self.mu)):
            raise DomainError(f"Gamma mean must be positive, got {self.mu}")
        if not (self.k > 0 and math.isfinite(self.k)):
            raise DomainError(f"Gamma shape must be positive, got {self.k}")


@dataclass(frozen=True)
class BernoulliParam:
    p: float

    def __post_init__(self):
        if not 0 < self.p < 1:
            raise DomainError(f"Bernoulli probability must lie in (0, 1), got {self.p}")


@dataclass(frozen=True)
class PredictorDerivatives:
    """Per-datum log-likelihood and its derivatives in the predictor.

    ``n_clamped`` counts predictor values that were pulled back into
    ``[-ETA_CLAMP, ETA_CLAMP]`` before evaluation.
    """

    loglik: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    n_clamped: int = 0


def _log1p_over(xi, z):
    """log(1 + xi*z) / xi, with the second-order expansion for tiny xi."""
    xi = np.asarray(xi, dtype=float)
    z = np.asarray(z, dtype=float)
    small = xi <= XI_SMALL
    safe_xi = np.where(small, 1.0, xi)
    with np.errstate(invalid="ignore", over="ignore"):
        exact = np.log1p(safe_xi * z) / safe_xi
        approx = z - 0.5 * xi * z * z
    return np.where(small, approx, exact)


def _quantile_factor(xi, q):
    """{(1-q)^(-xi) - 1} / xi, continuous at xi = 0 where it equals -log(1-q)."""
    ell = -math.log1p(-q)
    xi = np.asarray(xi, dtype=float)
    small = xi <= XI_SMALL
    safe_xi = np.where(small, 1.0, xi)
    exact = np.expm1(safe_xi * ell) / safe_xi
    return np.where(small, ell + 0.5 * xi * ell * ell, exact)


def gp_survival(y, par: GPScaleParam):
    """Pr(Y > y) for the GP law with scale ``sigma`` and tail index ``xi``."""
    y_arr = np.asarray(y, dtype=float)
    if np.any(y_arr < 0) or np.any(np.isnan(y_arr)):
        raise DomainError("GP survival needs y >= 0")
    out = np.exp(-_log1p_over(par.xi, y_arr / par.sigma))
    return float(out) if np.ndim(y) == 0 else out


def gp_logpdf(y, par: GPScaleParam):
    y_arr = np.asarray(y, dtype=float)
    if np.any(y_arr < 0):
        raise DomainError("GP density needs y >= 0")
    z = y_arr / par.sigma
    out = -math.log(par.sigma) - _log1p_over(par.xi, z) - np.log1p(par.xi * z)
    return float(out) if np.ndim(y) == 0 else out


def convert_params(par: GPQuantileParam) -> GPScaleParam:
    """Map the quantile parametrization onto the usual (sigma, xi) pair."""
    sigma = par.kappa_q / float(_quantile_factor(par.xi, par.q))
    return GPScaleParam(sigma=sigma, xi=par.xi)


def to_quantile_param(par: GPScaleParam, q: float) -> GPQuantileParam:
    kappa = par.sigma * float(_quantile_factor(par.xi, q))
    return GPQuantileParam(kappa_q=kappa, q=q, xi=par.xi)


def gp_cdf(y, par: GPQuantileParam):
    """GP distribution function in the quantile parametrization."""
    return 1.0 - gp_survival(y, convert_params(par))


def gp_quantile(alpha, par: GPQuantileParam):
    """Value y with GP(y; kappa_q, xi) = alpha.

    Written as a ratio of ``expm1`` terms so that ``alpha == q`` returns
    ``kappa_q`` and small positive ``xi`` does not lose precision.
    """
    a = np.asarray(alpha, dtype=float)
    if np.any(~((a > 0) & (a < 1))):
        raise DomainError("quantile level must lie in (0, 1)")
    la = -np.log1p(-a)
    lq = -math.log1p(-par.q)
    if par.xi <= XI_SMALL:
        out = par.kappa_q * (la / lq) * (1.0 + 0.5 * par.xi * (la - lq))
    else:
        out = par.kappa_q * np.expm1(par.xi * la) / math.expm1(par.xi * lq)
    out = np.where(a == par.q, par.kappa_q, out)
    return float(out) if np.ndim(alpha) == 0 else out


def gp_sample(rng: np.random.Generator, par: GPQuantileParam, size=None):
    u = rng.random(size)
    return gp_quantile(np.clip(u, 1e-300, 1 - 1e-16), par)


def gamma_logpdf(y, par: GammaMeanShape):
    """Log density of the Gamma law with mean ``mu`` and shape ``k``."""
    y_arr = np.asarray(y, dtype=float)
    if np.any(~(y_arr > 0)):
        raise DomainError("Gamma density needs y > 0")
    k, mu = par.k, par.mu
    out = (k * math.log(k) - k * math.log(mu) - special.gammaln(k)
           + (k - 1.0) * np.log(y_arr) - k * y_arr / mu)
    return float(out) if np.ndim(y) == 0 else out


def gamma_cdf(y, par: GammaMeanShape):
    y_arr = np.maximum(np.asarray(y, dtype=float), 0.0)
    out = special.gammainc(par.k, par.k * y_arr / par.mu)
    return float(out) if np.ndim(y) == 0 else out


def gamma_quantile(p: float, par: GammaMeanShape, *, rtol: float = 1e-12,
                   maxiter: int = 200) -> float:
    """Gamma ``p``-quantile by bracketed root finding on the incomplete gamma.

    The bracket starts at the mean and doubles (or halves) until it straddles
    the root, so only the regularized lower incomplete gamma is needed.
    """
    if not 0 < p < 1:
        raise DomainError(f"probability must lie in (0, 1), got {p}")
    k, mu = par.k, par.mu

    def f(v):
        return special.gammainc(k, v) - p

    # Work in the standardized variable v = k*y/mu.
    lo, hi = 0.0, float(k)
    for _ in range(maxiter):
        if f(hi) >= 0:
            break
        lo, hi = hi, 2.0 * hi
    else:
        raise ConvergenceError(f"could not bracket Gamma quantile p={p}, k={k}")
    if lo == 0.0:
        lo = hi
        for _ in range(maxiter):
            lo *= 0.5
            if f(lo) <= 0:
                break
        else:
            raise ConvergenceError(f"could not bracket Gamma quantile p={p}, k={k}")
    if f(lo) == 0:
        return lo * mu / k
    try:
        v, info = optimize.brentq(f, lo, hi, xtol=1e-300, rtol=max(rtol, 4 * np.finfo(float).eps),
                                  maxiter=maxiter, full_output=True)
    except RuntimeError as exc:
        raise ConvergenceError(str(exc)) from exc
    if not info.converged:
        raise ConvergenceError(f"Gamma quantile did not converge: {info.flag}")
    return v * mu / k


def bernoulli_logpmf(z, par: BernoulliParam):
    z = np.asarray(z, dtype=float)
    out = z * math.log(par.p) + (1.0 - z) * math.log1p(-par.p)
    return float(out) if out.ndim == 0 else out


def logistic(eta):
    return special.expit(eta)


def _clamp(eta):
    eta = np.asarray(eta, dtype=float)
    clipped = np.clip(eta, -ETA_CLAMP, ETA_CLAMP)
    return clipped, int(np.count_nonzero(clipped != eta))


def predictor_derivs(y, family: str, eta, hyper: Mapping[str, float] | None = None,
                     offset=0.0) -> PredictorDerivatives:
    """Log-likelihood and its first two derivatives in the linear predictor.

    Links: Gamma ``mu = exp(offset + eta)``; Bernoulli
    ``p = logistic(offset + eta)``; GP ``kappa_q = exp(offset + eta)`` with
    quantile level ``hyper['q']`` (default 0.5) and tail index
    ``hyper['xi']``; Gaussian (identity link, used for exactness checks) with
    noise precision ``hyper['precision']``.

    The offset-shifted predictor is clamped to ``[-40, 40]``; the number of
    clamped entries is returned in ``n_clamped``.
    """
    hyper = dict(hyper or {})
    y = np.asarray(y, dtype=float)
    lin, n_clamped = _clamp(np.asarray(eta, dtype=float) + offset)

    if family == "gamma":
        k = float(hyper["shape"])
        r = y * np.exp(-lin)
        loglik = (k * math.log(k) - special.gammaln(k) + (k - 1.0) * np.log(y)
                  - k * lin - k * r)
        d1 = k * (r - 1.0)
        d2 = -k * r
    elif family == "bernoulli":
        p = special.expit(lin)
        loglik = y * lin - np.logaddexp(0.0, lin)
        d1 = y - p
        d2 = -p * (1.0 - p)
    elif family == "gp":
        xi = float(hyper["xi"])
        q = float(hyper.get("q", 0.5))
        if xi < 0:
            raise DomainError("GP likelihood needs xi >= 0")
        b = float(_quantile_factor(xi, q))
        # B is the excess in units of the GP scale sigma = kappa / b.
        big_b = b * y * np.exp(-lin)
        loglik = -lin + math.log(b) - (1.0 + xi) * _log1p_over(xi, big_b)
        denom = 1.0 + xi * big_b
        d1 = -1.0 + (1.0 + xi) * big_b / denom
        d2 = -(1.0 + xi) * big_b / (denom * denom)
    elif family == "gaussian":
        tau = float(hyper["precision"])
        resid = y - lin
        loglik = 0.5 * math.log(tau / (2.0 * math.pi)) - 0.5 * tau * resid * resid
        d1 = tau * resid
        d2 = np.full_like(resid, -tau)
    else:
        raise DomainError(f"unknown likelihood family {family!r}")
    return PredictorDerivatives(loglik=loglik, d1=d1, d2=d2, n_clamped=n_clamped)
