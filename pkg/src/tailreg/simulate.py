"""Synthetic precipitation from the three-stage generative model.

A day is dry with probability ``1 - p_wet``. A wet day is drawn from the
Gamma law truncated to ``(0, u]`` with probability ``p_plus`` and from
``u + GP`` otherwise, where ``u`` is the Gamma ``p_plus``-quantile. The
overall exceedance probability of ``u`` is therefore ``p_wet * (1 - p_plus)``
and the exact overall quantiles follow from the plug-in formula with the
true surfaces.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import DomainError
from .latent_effects import N_WEEKS, SiteSet, weeks_of_dates
from .tail_distributions import GPQuantileParam, gamma_quantile, GammaMeanShape, gp_quantile
from .tail_pipeline import Dataset, calendar_targets, overall_quantile


@dataclass(frozen=True, eq=False)
class TruthSpec:
    """True station x week surfaces. Arrays are ``(n_sites, 52)``."""

    sites: SiteSet
    first_year: int
    last_year: int
    log_mu: np.ndarray
    shape: float
    p_wet: np.ndarray
    p_plus: float
    xi: float
    log_r: np.ndarray | float = 0.0
    q: float = 0.5

    def __post_init__(self):
        cell = (len(self.sites), N_WEEKS)
        for name in ("log_mu", "p_wet", "log_r"):
            arr = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), cell).copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (np.all(self.p_wet > 0) and np.all(self.p_wet < 1)):
            raise DomainError("p_wet must lie in (0, 1)")
        if not 0 < self.p_plus < 1 or not self.shape > 0 or self.xi < 0:
            raise DomainError("invalid p_plus, shape or xi")
        if self.last_year < self.first_year:
            raise DomainError("last_year precedes first_year")

    @property
    def mu(self) -> np.ndarray:
        return np.exp(self.log_mu)

    @property
    def u(self) -> np.ndarray:
        return self.mu * gamma_quantile(self.p_plus, GammaMeanShape(1.0, self.shape))

    @property
    def p_u(self) -> np.ndarray:
        return self.p_wet * (1.0 - self.p_plus)

    @property
    def kappa(self) -> np.ndarray:
        return self.mu * np.exp(self.log_r)

    def quantile(self, alpha: float) -> np.ndarray:
        """Exact overall ``alpha``-quantile per cell (NaN where ``alpha <= 1 - p_u``)."""
        return overall_quantile(alpha, self.u, self.p_u, self.kappa, self.xi, self.q)[0]

    def to_record(self, alphas=(0.998,)) -> dict:
        return {
            "site_ids": list(self.sites.ids),
            "first_year": self.first_year, "last_year": self.last_year,
            "shape": self.shape, "p_plus": self.p_plus, "xi": self.xi, "q": self.q,
            "log_mu": self.log_mu.tolist(), "p_wet": self.p_wet.tolist(), "log_r": self.log_r.tolist(),
            "u": self.u.tolist(), "p_u": self.p_u.tolist(),
            "quantiles": {str(a): self.quantile(a).tolist() for a in alphas},
        }


def smooth_truth(sites: SiteSet, first_year: int, last_year: int, *, shape: float = 0.8,
                 p_plus: float = 0.92, xi: float = 0.2, base_mu: float = 0.2,
                 spatial_amp: float = 0.2, weekly_amp: float = 0.3, p_wet: float = 0.5,
                 wet_weekly_amp: float = 0.3, spatial: bool = True) -> TruthSpec:
    """Smooth truth: a planar spatial gradient and an annual sinusoid in ``log mu`` and ``logit p_wet``."""
    coords = np.asarray(sites.coords, dtype=float)
    if spatial and len(sites) > 1:
        c = coords[:, 0] - coords[:, 0].mean()
        span = np.ptp(coords[:, 0]) or 1.0
        sx = 2.0 * c / span
    else:
        sx = np.zeros(len(sites))
    w = np.arange(N_WEEKS)
    season = np.cos(2 * np.pi * (w - 30) / N_WEEKS)
    log_mu = np.log(base_mu) + spatial_amp * sx[:, None] + weekly_amp * season[None, :]
    logit_wet = special.logit(p_wet) + wet_weekly_amp * season[None, :] + 0.5 * spatial_amp * sx[:, None]
    return TruthSpec(sites, first_year, last_year, log_mu=log_mu, shape=shape,
                     p_wet=special.expit(logit_wet), p_plus=p_plus, xi=xi)


def simulate(truth: TruthSpec, seed: int = 0, *, stations=None, dates=None):
    """Draw one value per (station, day); returns ``(Dataset, truth.to_record())``.

    Targets default to every site on every day of the truth's years.
    """
    if stations is None:
        stations, dates = calendar_targets(truth.sites, truth.first_year, truth.last_year)
    dates = np.asarray(dates, dtype="datetime64[D]")
    rng = np.random.default_rng(seed)
    n = dates.size
    sidx = np.array([truth.sites.index(s) for s in stations], dtype=np.int64)
    widx = weeks_of_dates(dates) - 1
    wet = rng.random(n) < truth.p_wet[sidx, widx]
    tail = rng.random(n) >= truth.p_plus
    level = rng.random(n)
    mu = truth.mu[sidx, widx]
    k = truth.shape
    # Truncated body by inversion of the regularized incomplete gamma.
    body = special.gammaincinv(k, level * truth.p_plus) * mu / k
    body = np.maximum(body, np.finfo(float).tiny)
    excess = gp_quantile(np.clip(level, 1e-300, 1 - 1e-16), GPQuantileParam(1.0, truth.q, truth.xi))
    exceed = truth.u[sidx, widx] + truth.kappa[sidx, widx] * excess
    value = np.where(wet, np.where(tail, exceed, body), 0.0)
    return Dataset(np.asarray(stations, dtype=object), dates, value, truth.sites), truth.to_record()
