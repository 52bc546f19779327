"""Latent Gaussian building blocks: intercept, Matérn spatial effect, cyclic RW2 weekly effect.

The latent vector is ordered ``(intercept, spatial[0..S), weekly[0..52))``.
The weekly block is intrinsic (rank 51) and carries a sum-to-zero constraint.
Inference works in constrained coordinates ``x = T z`` where ``T`` is
block-diagonal with an orthonormal basis of the sum-to-zero subspace in the
weekly block, so the working prior precision ``T' Q T`` is proper.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg, sparse, special

from .errors import DataError, DomainError

N_WEEKS = 52
SPATIAL_JITTER = 1e-10


@dataclass(frozen=True, eq=False)
class SiteSet:
    """Stations with planar coordinates in km."""

    ids: tuple
    coords: np.ndarray = field(repr=False)

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        coords = np.asarray(self.coords, dtype=float).reshape(len(ids), 2)
        if len(set(ids)) != len(ids):
            raise DataError("site ids must be unique")
        if not np.all(np.isfinite(coords)):
            raise DataError("site coordinates must be finite")
        object.__setattr__(self, "ids", ids)
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)

    @classmethod
    def from_records(cls, records):
        records = list(records)
        ids = [r[0] for r in records]
        coords = np.array([[r[1], r[2]] for r in records], dtype=float).reshape(-1, 2)
        return cls(ids, coords)

    def __len__(self):
        return len(self.ids)

    def index(self, site_id) -> int:
        try:
            return self._lookup[str(site_id)]
        except KeyError:
            raise DataError(f"unknown site id {site_id!r}") from None

    @property
    def _lookup(self):
        cache = self.__dict__.get("_lookup_cache")
        if cache is None:
            cache = {sid: i for i, sid in enumerate(self.ids)}
            object.__setattr__(self, "_lookup_cache", cache)
        return cache

    def distances(self) -> np.ndarray:
        diff = self.coords[:, None, :] - self.coords[None, :, :]
        return np.sqrt((diff ** 2).sum(axis=-1))

    def subset(self, keep_ids) -> "SiteSet":
        keep = [i for i, sid in enumerate(self.ids) if sid in set(map(str, keep_ids))]
        return SiteSet(tuple(self.ids[i] for i in keep), self.coords[keep])


@dataclass(frozen=True)
class MaternSpec:
    psi: float
    tau_s: float = 1.0
    nu: float = 1.0

    def __post_init__(self):
        if not self.psi > 0:
            raise DomainError(f"Matérn range must be positive, got {self.psi}")
        if not self.tau_s > 0:
            raise DomainError(f"spatial precision must be positive, got {self.tau_s}")
        if self.nu != 1.0:
            raise DomainError("smoothness is fixed at nu = 1")


@dataclass(frozen=True)
class CyclicRW2Spec:
    tau_t: float
    n_weeks: int = N_WEEKS

    def __post_init__(self):
        if not self.tau_t > 0:
            raise DomainError(f"RW2 precision must be positive, got {self.tau_t}")
        if self.n_weeks < 5:
            raise DomainError("cyclic RW2 needs at least 5 nodes")


def matern_correlation(h, psi: float, nu: float = 1.0):
    """Matérn correlation at distance ``h`` for range ``psi``; 1 at ``h = 0``."""
    h_arr = np.asarray(h, dtype=float)
    if np.any(h_arr < 0):
        raise DomainError("distance must be nonnegative")
    x = math.sqrt(2.0 * nu) * h_arr / psi
    pos = x > 0
    xs = np.where(pos, x, 1.0)
    with np.errstate(over="ignore", invalid="ignore"):
        val = 2.0 ** (1.0 - nu) / special.gamma(nu) * xs ** nu * special.kv(nu, xs)
    val = np.where(np.isfinite(val), val, 0.0)
    out = np.where(pos, val, 1.0)
    return float(out) if np.ndim(h) == 0 else out


def spatial_correlation(sites: SiteSet, psi: float) -> np.ndarray:
    return matern_correlation(sites.distances(), psi)


def build_spatial_precision(spec: MaternSpec, sites: SiteSet) -> np.ndarray:
    """Dense precision of the Matérn field over ``sites``.

    Inverts ``tau_s^-1 (R + 1e-10 I)`` through a Cholesky factor; failure
    means the correlation matrix is numerically singular, which in practice
    is duplicated stations.
    """
    n = len(sites)
    if n == 0:
        return np.zeros((0, 0))
    corr = spatial_correlation(sites, spec.psi) + SPATIAL_JITTER * np.eye(n)
    try:
        chol = linalg.cho_factor(corr, lower=True)
        if np.min(np.diag(chol[0])) ** 2 < 10 * SPATIAL_JITTER:
            raise linalg.LinAlgError("pivot at jitter level")
    except linalg.LinAlgError as exc:
        raise DataError("spatial covariance is numerically singular; "
                        "check for duplicate or near-duplicate sites") from exc
    prec = linalg.cho_solve(chol, np.eye(n)) * spec.tau_s
    return 0.5 * (prec + prec.T)


def cyclic_second_difference(n: int) -> sparse.csr_matrix:
    """Rows give x[w-1] - 2 x[w] + x[w+1] with indices taken modulo n."""
    rows = np.repeat(np.arange(n), 3)
    cols = np.stack([(np.arange(n) - 1) % n, np.arange(n), (np.arange(n) + 1) % n], axis=1).ravel()
    vals = np.tile([1.0, -2.0, 1.0], n)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))


def build_rw2_precision(spec: CyclicRW2Spec):
    """Cyclic RW2 precision and its sum-to-zero constraint row.

    Returns ``(Q, constraint)`` with ``Q = tau_t D'D`` (rank ``n - 1``).
    """
    d = cyclic_second_difference(spec.n_weeks)
    q = (d.T @ d).toarray() * spec.tau_t
    return q, np.ones((1, spec.n_weeks))


def day_of_year(date) -> int:
    if isinstance(date, (int, np.integer)):
        return int(date)
    if isinstance(date, np.datetime64):
        date = date.astype("datetime64[D]").item()
    return date.timetuple().tm_yday


def week_of_day(day) -> int:
    """Week index in 1..52; days 358-366 all fall in week 52."""
    doy = day_of_year(day)
    if not 1 <= doy <= 366:
        raise DomainError(f"day of year out of range: {doy}")
    return min((doy + 6) // 7, N_WEEKS)


def weeks_of_dates(dates) -> np.ndarray:
    """Vectorized :func:`week_of_day` for an array of ``datetime64[D]``."""
    d = np.asarray(dates, dtype="datetime64[D]")
    doy = (d - d.astype("datetime64[Y]")).astype(int) + 1
    return np.minimum((doy + 6) // 7, N_WEEKS)


def sum_to_zero_basis(n: int) -> np.ndarray:
    """Orthonormal ``n x (n-1)`` basis of vectors summing to zero."""
    return linalg.null_space(np.ones((1, n)))


@dataclass(frozen=True, eq=False)
class ModelStructure:
    """Block structure of one stage's latent field.

    ``spatial_unit`` and ``weekly_unit`` are the block precisions at unit
    ``tau_s`` / ``tau_t``; ``obs_matrix`` maps the full latent vector onto the
    predictors; ``basis`` maps constrained working coordinates onto it.
    """

    n_sites: int
    n_weeks: int
    intercept_precision: float
    spatial_unit: np.ndarray = field(repr=False)
    weekly_unit: np.ndarray = field(repr=False)
    obs_matrix: sparse.csr_matrix = field(repr=False)
    constraints: np.ndarray = field(repr=False)
    basis: np.ndarray = field(repr=False)
    site_index: np.ndarray = field(repr=False)
    week_index: np.ndarray = field(repr=False)

    @property
    def block_sizes(self):
        return (1, self.n_sites, self.n_weeks)

    @property
    def dim(self) -> int:
        return 1 + self.n_sites + self.n_weeks

    @property
    def working_dim(self) -> int:
        return self.basis.shape[1]

    @property
    def spatial_slice(self) -> slice:
        return slice(1, 1 + self.n_sites)

    @property
    def weekly_slice(self) -> slice:
        return slice(1 + self.n_sites, self.dim)

    def precision_blocks(self, tau_s: float, tau_t: float):
        return (np.array([[self.intercept_precision]]),
                tau_s * self.spatial_unit,
                tau_t * self.weekly_unit)

    def precision(self, tau_s: float, tau_t: float) -> np.ndarray:
        """Full (singular) block-diagonal prior precision of the latent vector."""
        return linalg.block_diag(*self.precision_blocks(tau_s, tau_t))

    def working_precision(self, tau_s: float, tau_t: float) -> np.ndarray:
        """Prior precision of the constrained working coordinates (full rank)."""
        bw = self.basis[self.weekly_slice, 1 + self.n_sites:]
        blocks = self.precision_blocks(tau_s, tau_t)
        return linalg.block_diag(blocks[0], blocks[1], bw.T @ blocks[2] @ bw)


def observation_matrix(site_index, week_index, n_sites: int,
                       n_weeks: int = N_WEEKS) -> sparse.csr_matrix:
    """Sparse map with unit entries at (intercept, site, week) per row.

    ``week_index`` is 0-based here.
    """
    site_index = np.asarray(site_index, dtype=np.int64)
    week_index = np.asarray(week_index, dtype=np.int64)
    n = site_index.size
    rows = np.repeat(np.arange(n), 3)
    cols = np.stack([np.zeros(n, dtype=np.int64), 1 + site_index,
                     1 + n_sites + week_index], axis=1).ravel()
    return sparse.csr_matrix((np.ones(3 * n), (rows, cols)),
                             shape=(n, 1 + n_sites + n_weeks))


def assemble_model(matern: MaternSpec, rw2: CyclicRW2Spec, sites: SiteSet,
                   obs: Sequence, *, intercept_variance: float = 1000.0) -> ModelStructure:
    """Build the latent structure for observations ``(site_id, day)``.

    ``day`` may be a date, a ``datetime64`` or a day-of-year integer.
    """
    site_idx = np.array([sites.index(s) for s, _ in obs], dtype=np.int64)
    week_idx = np.array([week_of_day(d) - 1 for _, d in obs], dtype=np.int64)
    return assemble_indexed(matern, rw2, sites, site_idx, week_idx,
                            intercept_variance=intercept_variance)


def assemble_indexed(matern: MaternSpec, rw2: CyclicRW2Spec, sites: SiteSet,
                     site_index, week_index, *,
                     intercept_variance: float = 1000.0) -> ModelStructure:
    """:func:`assemble_model` for pre-computed 0-based site and week indices."""
    site_index = np.asarray(site_index, dtype=np.int64)
    week_index = np.asarray(week_index, dtype=np.int64)
    n_sites, n_weeks = len(sites), rw2.n_weeks
    if site_index.size and (site_index.min() < 0 or site_index.max() >= n_sites):
        raise DataError("observation refers to an unknown site")
    spatial_unit = build_spatial_precision(MaternSpec(matern.psi, 1.0), sites)
    weekly_unit, constraint = build_rw2_precision(CyclicRW2Spec(1.0, n_weeks))
    dim = 1 + n_sites + n_weeks
    basis = np.zeros((dim, dim - 1))
    basis[: 1 + n_sites, : 1 + n_sites] = np.eye(1 + n_sites)
    basis[1 + n_sites:, 1 + n_sites:] = sum_to_zero_basis(n_weeks)
    full_constraint = np.zeros((1, dim))
    full_constraint[0, 1 + n_sites:] = constraint
    for arr in (spatial_unit, weekly_unit, basis, full_constraint, site_index, week_index):
        arr.setflags(write=False)
    return ModelStructure(
        n_sites=n_sites,
        n_weeks=n_weeks,
        intercept_precision=1.0 / intercept_variance,
        spatial_unit=spatial_unit,
        weekly_unit=weekly_unit,
        obs_matrix=observation_matrix(site_index, week_index, n_sites, n_weeks),
        constraints=full_constraint,
        basis=basis,
        site_index=site_index,
        week_index=week_index,
    )
