"""Laplace-approximation inference for latent Gaussian models.

For fixed hyperparameters ``theta`` the conditional posterior of the latent
field is approximated by a Gaussian at its mode (damped Newton-Raphson). The
same approximation gives the Laplace estimate of ``log pi(theta | y)``, which
is explored on a grid; latent marginals are the grid-weighted mixtures of the
conditional Gaussians (the simplified scheme, no second Laplace step).

All latent computations run in working coordinates ``z`` with ``x = T z``.
For the three-block models ``T`` removes the sum-to-zero direction of the
weekly random walk, which makes the working prior proper; for generic models
``T`` is the identity.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import integrate, interpolate, linalg, optimize, sparse, special

from .errors import ConvergenceError, DataError, DomainError
from .tail_distributions import predictor_derivs

LOG_2PI = math.log(2.0 * math.pi)
Z95 = special.ndtri(0.975)


@dataclass(frozen=True)
class FreeHyper:
    """A hyperparameter integrated over on the grid.

    ``log_prior`` is the log density of the internal value ``theta`` (for a
    ``"log"`` transform, the density of ``log x`` with the Jacobian included).
    """

    name: str
    log_prior: Callable[[float], float]
    initial: float = 0.0
    transform: str = "log"

    def natural(self, theta):
        if self.transform == "log":
            return np.exp(theta)
        if self.transform == "identity":
            return theta
        raise DomainError(f"unknown transform {self.transform!r}")


@dataclass(eq=False)
class LatentGaussianModel:
    """Likelihood family, data, observation map and prior precision.

    ``precision(hyper)`` returns the working-coordinate prior precision for a
    dict of natural-scale hyperparameter values (fixed and free merged).
    ``names`` labels the full latent components, the rows of ``basis``.
    """

    family: str
    y: np.ndarray
    obs_matrix: sparse.spmatrix
    precision: Callable[[Mapping[str, float]], np.ndarray]
    basis: np.ndarray | None = None
    offset: np.ndarray | float = 0.0
    hyper_fixed: Mapping[str, float] = field(default_factory=dict)
    hyper_free: Sequence[FreeHyper] = ()
    names: Sequence[str] | None = None
    newton_tol: float = 1e-8
    newton_max_iter: int = 100

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.obs_matrix = sparse.csr_matrix(self.obs_matrix)
        if self.obs_matrix.shape[0] != self.y.size:
            raise DataError("data length must equal the number of observation-matrix rows")
        p = self.obs_matrix.shape[1]
        if self.basis is None:
            self.basis = np.eye(p)
        if self.basis.shape[0] != p:
            raise DataError("basis rows must match the latent dimension")
        self.offset = np.broadcast_to(np.asarray(self.offset, dtype=float), self.y.shape)
        self.hyper_free = tuple(self.hyper_free)
        if self.names is None:
            self.names = [f"x[{i}]" for i in range(p)]
        clash = set(self.hyper_fixed) & {h.name for h in self.hyper_free}
        if clash:
            raise DataError(f"hyperparameters both fixed and free: {sorted(clash)}")

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    @property
    def free_names(self):
        return [h.name for h in self.hyper_free]

    def hyper_values(self, theta) -> dict:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if theta.size != len(self.hyper_free):
            raise DomainError("theta has the wrong number of components")
        values = dict(self.hyper_fixed)
        for h, t in zip(self.hyper_free, theta):
            values[h.name] = float(h.natural(t))
        return values

    def log_prior(self, theta) -> float:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        return float(sum(h.log_prior(t) for h, t in zip(self.hyper_free, theta)))


@dataclass(eq=False)
class GaussianApprox:
    """Gaussian approximation of pi(z | theta, y) at its mode."""

    hyper: dict
    mode_z: np.ndarray
    precision: np.ndarray
    chol: np.ndarray
    objective: float
    loglik: float
    grad_norm: float
    n_iter: int
    n_clamped: int
    n_curv_clamped: int
    trace: list

    @property
    def log_det_half(self) -> float:
        return float(np.log(np.diag(self.chol)).sum())

    def covariance_z(self) -> np.ndarray:
        return linalg.cho_solve((self.chol, True), np.eye(self.chol.shape[0]))


def _chol(mat, what="matrix"):
    try:
        return linalg.cholesky(0.5 * (mat + mat.T), lower=True)
    except linalg.LinAlgError as exc:
        raise ConvergenceError(f"{what} is not positive definite") from exc


def _evaluate(model, hyper, z):
    eta = model.obs_matrix @ (model.basis @ z)
    return predictor_derivs(model.y, model.family, eta, hyper, offset=model.offset)


def newton_mode(model: LatentGaussianModel, theta, init=None, *, tol: float = 1e-8,
                max_iter: int = 100, q_matrix=None) -> GaussianApprox:
    """Mode and curvature of pi(z | theta, y) by damped Newton-Raphson.

    Steps are halved until the objective does not decrease beyond roundoff.
    Converged when the max-norm of the gradient is below ``tol`` or when a
    full step's predicted gain is at floating-point noise level.
    """
    hyper = model.hyper_values(theta) if not isinstance(theta, Mapping) else dict(theta)
    q = model.precision(hyper) if q_matrix is None else q_matrix
    a = model.obs_matrix
    t = model.basis
    d = t.shape[1]
    z = np.zeros(d) if init is None else np.array(init, dtype=float)

    def objective(zv):
        der = _evaluate(model, hyper, zv)
        return float(der.loglik.sum() - 0.5 * zv @ q @ zv), der

    f, der = objective(z)
    if not np.isfinite(f):
        z = np.zeros(d)
        f, der = objective(z)
    trace = [f]
    n_curv = 0
    for it in range(max_iter + 1):
        grad = t.T @ (a.T @ der.d1) - q @ z
        gnorm = float(np.max(np.abs(grad))) if d else 0.0
        curv = -der.d2
        n_curv = int(np.count_nonzero(curv < 0))
        curv = np.maximum(curv, 0.0)
        h = t.T @ (a.T @ sparse.diags(curv) @ a).toarray() @ t + q
        chol = _chol(h, "Newton Hessian")
        if gnorm < tol:
            break
        if it == max_iter:
            raise ConvergenceError(
                f"Newton did not converge in {max_iter} iterations (|grad|={gnorm:.3e})", trace)
        step = linalg.cho_solve((chol, True), grad)
        # Newton decrement: predicted gain of a full step.
        gain = 0.5 * float(grad @ step)
        slack = 64 * np.finfo(float).eps * (1.0 + abs(f))
        s = 1.0
        for _ in range(60):
            f_new, der_new = objective(z + s * step)
            if np.isfinite(f_new) and f_new >= f - slack:
                break
            s *= 0.5
        else:
            scale = float(np.max(np.abs(t.T @ (abs(a).T @ np.abs(der.d1))) + np.abs(q @ z))) + 1.0
            if gnorm <= 1e3 * np.finfo(float).eps * scale:
                break
            raise ConvergenceError(
                f"Newton line search stalled with |grad|={gnorm:.3e}", trace)
        z = z + s * step
        f, der = f_new, der_new
        trace.append(f)
        if s == 1.0 and gain <= slack:
            grad = t.T @ (a.T @ der.d1) - q @ z
            gnorm = float(np.max(np.abs(grad))) if d else 0.0
            curv = -der.d2
            n_curv = int(np.count_nonzero(curv < 0))
            h = t.T @ (a.T @ sparse.diags(np.maximum(curv, 0.0)) @ a).toarray() @ t + q
            chol = _chol(h, "Newton Hessian")
            break
    return GaussianApprox(
        hyper=hyper, mode_z=z, precision=h, chol=chol, objective=f,
        loglik=float(der.loglik.sum()), grad_norm=gnorm, n_iter=it,
        n_clamped=der.n_clamped, n_curv_clamped=n_curv, trace=trace,
    )


def _laplace(model, theta, init=None, **kw):
    hyper = model.hyper_values(theta)
    q = model.precision(hyper)
    qchol = _chol(q, "prior precision")
    kw.setdefault("tol", model.newton_tol)
    kw.setdefault("max_iter", model.newton_max_iter)
    approx = newton_mode(model, hyper, init, q_matrix=q, **kw)
    value = (model.log_prior(theta) + approx.objective
             + float(np.log(np.diag(qchol)).sum()) - approx.log_det_half)
    return value, approx


def log_post_hyper(model: LatentGaussianModel, theta, init=None) -> float:
    """Laplace estimate of log pi(theta | y) up to the normalizing constant.

    Equals ``log pi(theta) + log pi(y | theta)`` exactly when the likelihood
    is Gaussian.
    """
    return _laplace(model, theta, init)[0]


@dataclass(eq=False)
class HyperGrid:
    """Grid over the internal hyperparameter scale with normalized weights.

    ``offsets`` are the integer grid coordinates; the point for offset ``j``
    is ``center + j * spacing``. ``modes`` and ``variances`` hold the latent
    Gaussian approximation (full coordinates) at every grid point.
    """

    names: list
    transforms: list
    center: np.ndarray
    spacing: np.ndarray
    offsets: np.ndarray
    points: np.ndarray
    log_post: np.ndarray
    weights: np.ndarray
    modes: np.ndarray
    variances: np.ndarray
    edge_mass: float = 0.0
    n_newton: int = 0
    n_clamped: int = 0
    n_curv_clamped: int = 0

    def __len__(self):
        return len(self.weights)


def _numeric_hessian(fun, x, h):
    k = x.size
    f0 = fun(x)
    hess = np.zeros((k, k))
    for i in range(k):
        ei = np.zeros(k)
        ei[i] = h
        hess[i, i] = (fun(x + ei) - 2 * f0 + fun(x - ei)) / h ** 2
        for j in range(i):
            ej = np.zeros(k)
            ej[j] = h
            val = (fun(x + ei + ej) - fun(x + ei - ej) - fun(x - ei + ej) + fun(x - ei - ej)) / (4 * h * h)
            hess[i, j] = hess[j, i] = val
    return hess


def find_hyper_mode(model: LatentGaussianModel):
    """Maximize the Laplace log-posterior of theta; returns (theta, value)."""
    x0 = np.array([h.initial for h in model.hyper_free], dtype=float)
    warm = {"z": None}

    def negative(theta):
        try:
            val, approx = _laplace(model, theta, warm["z"])
        except ConvergenceError:
            return 1e300
        warm["z"] = approx.mode_z
        return -val if np.isfinite(val) else 1e300

    if x0.size == 1:
        # Bracket a 1-d maximum by stepping downhill in unit strides.
        res = optimize.minimize_scalar(negative, bracket=(x0[0] - 1.0, x0[0] + 1.0),
                                       tol=1e-10)
        theta = np.array([res.x])
    else:
        res = optimize.minimize(negative, x0, method="Nelder-Mead",
                                options={"xatol": 1e-6, "fatol": 1e-10, "maxiter": 4000})
        theta = np.asarray(res.x)
    val = -negative(theta)
    if not np.isfinite(val) or val <= -1e299:
        raise ConvergenceError("could not locate the hyperparameter posterior mode")
    return theta, val, warm["z"]


def explore_grid(model: LatentGaussianModel, *, step: float = 0.75, drop: float = 6.0,
                 max_points: int = 10_000) -> HyperGrid:
    """Mode-centred grid over the free hyperparameters.

    Axes are scaled by the marginal posterior SDs from a finite-difference
    Hessian at the mode; each face of the box is pushed outwards until the
    largest log-density on it is at least ``drop`` below the maximum.
    """
    k = len(model.hyper_free)
    names = model.free_names
    transforms = [h.transform for h in model.hyper_free]
    if k == 0:
        _, approx = _laplace(model, np.zeros(0))
        return HyperGrid(
            names=[], transforms=[], center=np.zeros(0), spacing=np.zeros(0),
            offsets=np.zeros((1, 0), dtype=int), points=np.zeros((1, 0)),
            log_post=np.array([0.0]), weights=np.array([1.0]),
            modes=(model.basis @ approx.mode_z)[None, :],
            variances=_marginal_variances(model, approx)[None, :],
            edge_mass=0.0, n_newton=approx.n_iter, n_clamped=approx.n_clamped,
            n_curv_clamped=approx.n_curv_clamped,
        )

    center, _, z_mode = find_hyper_mode(model)

    def lp(theta):
        return _laplace(model, theta, z_mode)[0]

    hess = -_numeric_hessian(lp, center, 1e-2)
    try:
        cov = np.linalg.inv(hess)
        sd = np.sqrt(np.diag(cov))
        if not np.all(np.isfinite(sd)) or np.any(np.diag(cov) <= 0) or np.any(np.linalg.eigvalsh(hess) <= 0):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        diag = np.diag(hess)
        sd = np.where(diag > 0, 1.0 / np.sqrt(np.abs(diag) + 1e-300), 1.0)
    sd = np.clip(sd, 1e-4, 5.0)
    spacing = step * sd

    cache = {}
    stats = {"newton": 0, "clamped": 0, "curv": 0}

    def evaluate(offset):
        key = tuple(int(v) for v in offset)
        if key not in cache:
            theta = center + np.asarray(key) * spacing
            try:
                val, approx = _laplace(model, theta, z_mode)
            except ConvergenceError:
                val, approx = -np.inf, None
            stats["newton"] += approx.n_iter if approx else 0
            if approx is not None:
                stats["clamped"] += approx.n_clamped
                stats["curv"] += approx.n_curv_clamped
            cache[key] = (val, approx)
        return cache[key][0]

    half = int(math.ceil(math.sqrt(2.0 * drop) / step))
    lo = np.full(k, -half)
    hi = np.full(k, half)
    peak = evaluate(np.zeros(k))
    for _ in range(200):
        box = list(itertools.product(*[range(lo[i], hi[i] + 1) for i in range(k)]))
        if len(box) > max_points:
            raise ConvergenceError(f"hyperparameter grid exceeds {max_points} points")
        values = {b: evaluate(b) for b in box}
        peak = max(peak, max(values.values()))
        grown = False
        for i in range(k):
            for side, bound in ((-1, lo), (1, hi)):
                face = [v for b, v in values.items() if b[i] == bound[i]]
                if max(face) > peak - drop:
                    bound[i] += side
                    grown = True
        if not grown:
            break
    else:
        raise ConvergenceError("hyperparameter grid did not close")

    box = list(itertools.product(*[range(lo[i], hi[i] + 1) for i in range(k)]))
    offsets = np.array(box, dtype=int)
    log_post = np.array([cache[b][0] for b in box])
    finite = np.isfinite(log_post)
    w = np.zeros_like(log_post)
    w[finite] = np.exp(log_post[finite] - log_post[finite].max())
    w /= w.sum()
    on_edge = np.any((offsets == lo) | (offsets == hi), axis=1)
    p = model.basis.shape[0]
    modes = np.zeros((len(box), p))
    variances = np.zeros((len(box), p))
    for idx, b in enumerate(box):
        approx = cache[b][1]
        if approx is None:
            continue
        modes[idx] = model.basis @ approx.mode_z
        variances[idx] = _marginal_variances(model, approx)
    return HyperGrid(
        names=names, transforms=transforms, center=center, spacing=spacing,
        offsets=offsets, points=center + offsets * spacing, log_post=log_post,
        weights=w, modes=modes, variances=variances,
        edge_mass=float(w[on_edge].sum()), n_newton=stats["newton"],
        n_clamped=stats["clamped"], n_curv_clamped=stats["curv"],
    )


def _marginal_variances(model, approx):
    # diag(T H^-1 T') via a triangular solve: L^-1 T' has columns whose squared norms are the variances.
    half = linalg.solve_triangular(approx.chol, model.basis.T, lower=True)
    return (half * half).sum(axis=0)


@dataclass
class PosteriorSummary:
    """Posterior mean, SD and central 95% interval per named component."""

    names: list
    mean: np.ndarray
    sd: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __len__(self):
        return len(self.names)

    def index(self, name) -> int:
        return list(self.names).index(name)

    def row(self, name) -> dict:
        i = self.index(name)
        return {"mean": float(self.mean[i]), "sd": float(self.sd[i]),
                "lower": float(self.lower[i]), "upper": float(self.upper[i])}

    def to_records(self):
        return [{"name": n, "mean": float(m), "sd": float(s), "lower": float(lo), "upper": float(up)}
                for n, m, s, lo, up in zip(self.names, self.mean, self.sd, self.lower, self.upper)]

    @classmethod
    def from_records(cls, records):
        records = list(records)
        return cls(
            names=[r["name"] for r in records],
            mean=np.array([r["mean"] for r in records], dtype=float),
            sd=np.array([r["sd"] for r in records], dtype=float),
            lower=np.array([r["lower"] for r in records], dtype=float),
            upper=np.array([r["upper"] for r in records], dtype=float),
        )


def _mixture_quantiles(w, m, s, probs):
    """Quantiles of per-column Gaussian mixtures (weights ``w`` over rows)."""
    out = np.empty((len(probs), m.shape[1]))
    lo_all = (m - 10 * s).min(axis=0)
    hi_all = (m + 10 * s).max(axis=0)
    for j in range(m.shape[1]):
        mj, sj = m[:, j], s[:, j]
        if np.all(sj == 0):
            for pi, p in enumerate(probs):
                order = np.argsort(mj)
                cw = np.cumsum(w[order])
                out[pi, j] = mj[order][np.searchsorted(cw, p)]
            continue
        sj = np.maximum(sj, 1e-300)
        for pi, p in enumerate(probs):
            def cdf(v):
                return float(w @ special.ndtr((v - mj) / sj)) - p
            out[pi, j] = optimize.brentq(cdf, lo_all[j], hi_all[j], xtol=1e-13, rtol=1e-13)
    return out


def latent_marginals(model: LatentGaussianModel, grid: HyperGrid) -> PosteriorSummary:
    """Mixture-of-Gaussians marginal posterior for every latent component."""
    keep = grid.weights > 1e-12 * grid.weights.max()
    w = grid.weights[keep] / grid.weights[keep].sum()
    m = grid.modes[keep]
    v = grid.variances[keep]
    mean = w @ m
    var = np.maximum(w @ (v + m * m) - mean * mean, 0.0)
    if len(w) == 1:
        sd = np.sqrt(v[0])
        lower, upper = m[0] - Z95 * sd, m[0] + Z95 * sd
        return PosteriorSummary(list(model.names), m[0].copy(), sd, lower, upper)
    q = _mixture_quantiles(w, m, np.sqrt(v), (0.025, 0.975))
    return PosteriorSummary(list(model.names), mean, np.sqrt(var), q[0], q[1])


def hyper_axis_density(grid: HyperGrid, axis: int, *, refine: int = 40):
    """Marginal density of one internal hyperparameter on a fine grid.

    Grid weights are summed over the other axes, then the log of the 1-d
    marginal is interpolated with a cubic spline. Returns ``(theta, density)``.
    """
    coords = grid.offsets[:, axis]
    levels = np.arange(coords.min(), coords.max() + 1)
    mass = np.array([grid.weights[coords == j].sum() for j in levels])
    h = grid.spacing[axis]
    theta = grid.center[axis] + levels * h
    fine = np.linspace(theta[0] - 0.5 * h, theta[-1] + 0.5 * h, refine * len(levels) + 1)
    pos = mass > 0
    if pos.sum() >= 3:
        floor = np.log(mass[pos].min()) - 10.0
        logm = np.where(pos, np.log(np.where(pos, mass, 1.0)), floor)
        spline = interpolate.CubicSpline(theta, logm)
        dens = np.exp(spline(fine) - logm.max())
    elif pos.sum() >= 1:
        dens = np.interp(fine, theta, mass)
    else:
        raise DataError("empty hyperparameter grid")
    dens /= integrate.trapezoid(dens, fine)
    return fine, dens


def hyper_marginals(model: LatentGaussianModel, grid: HyperGrid) -> PosteriorSummary:
    """Posterior summaries of the free hyperparameters on their natural scale."""
    names, mean, sd, lower, upper = [], [], [], [], []
    if len(grid.names) == 0:
        return PosteriorSummary([], np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0))
    for k, hyp in enumerate(model.hyper_free):
        levels = np.unique(grid.offsets[:, k])
        if len(levels) == 1:
            val = float(hyp.natural(grid.center[k]))
            names.append(hyp.name)
            mean.append(val)
            sd.append(0.0)
            lower.append(val)
            upper.append(val)
            continue
        theta, dens = hyper_axis_density(grid, k)
        nat = hyp.natural(theta)
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(theta))])
        cdf /= cdf[-1]
        m1 = integrate.trapezoid(nat * dens, theta)
        m2 = integrate.trapezoid(nat * nat * dens, theta)
        q_lo = np.interp(0.025, cdf, theta)
        q_hi = np.interp(0.975, cdf, theta)
        names.append(hyp.name)
        mean.append(m1)
        sd.append(math.sqrt(max(m2 - m1 * m1, 0.0)))
        lower.append(float(hyp.natural(q_lo)))
        upper.append(float(hyp.natural(q_hi)))
    return PosteriorSummary(names, np.array(mean), np.array(sd), np.array(lower), np.array(upper))


@dataclass(eq=False)
class LaplaceFit:
    grid: HyperGrid
    latent: PosteriorSummary
    hyper: PosteriorSummary

    @property
    def diagnostics(self) -> dict:
        return {
            "grid_size": len(self.grid),
            "edge_mass": float(self.grid.edge_mass),
            "newton_iterations": int(self.grid.n_newton),
            "eta_clamped": int(self.grid.n_clamped),
            "curvature_clamped": int(self.grid.n_curv_clamped),
        }


def fit(model: LatentGaussianModel, **grid_options) -> LaplaceFit:
    grid = explore_grid(model, **grid_options)
    return LaplaceFit(grid=grid, latent=latent_marginals(model, grid),
                      hyper=hyper_marginals(model, grid))
