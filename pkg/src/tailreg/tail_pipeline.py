"""Three-stage tail regression and extreme-quantile prediction.

Stage 1 fits a Gamma regression to positive intensities and fixes the
threshold surface ``u`` as its ``p_plus``-quantile. Stage 2 fits the overall
exceedance probability ``p_u`` by Bernoulli regression over all days, dry ones
included. Stage 3 fits a GP (median parametrization) to the excesses, with the
Stage-1 log mean as offset. Every predictor has the form
``intercept + x(station) + x(week)``, so all fitted surfaces live on the
station x week grid.
"""
from __future__ import annotations

import contextlib
import hashlib
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .errors import ConvergenceError, DataError, DomainError, TailRegError
from .laplace_engine import FreeHyper, LaplaceFit, LatentGaussianModel, PosteriorSummary, fit
from .latent_effects import (
    N_WEEKS,
    CyclicRW2Spec,
    MaternSpec,
    ModelStructure,
    SiteSet,
    assemble_indexed,
    weeks_of_dates,
)
from .pc_priors import GammaPrior, PrecisionPrior, xi_prior
from .tail_distributions import GammaMeanShape, GPQuantileParam, gamma_quantile, gp_cdf, gp_quantile, logistic

STAGES = ("gamma", "bernoulli", "gp")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Daily precipitation records (inches) on a fixed set of sites.

    ``sites`` may hold stations without any record; they still receive
    predictions through the spatial effect.
    """

    station: np.ndarray
    date: np.ndarray
    value: np.ndarray
    sites: SiteSet

    def __post_init__(self):
        text = np.asarray(self.station).astype(str)
        station = text.astype(object)
        date = np.asarray(self.date, dtype="datetime64[D]")
        value = np.asarray(self.value, dtype=float)
        if not (station.shape == date.shape == value.shape) or station.ndim != 1:
            raise DataError("station, date and value must be 1-d arrays of equal length")
        if value.size and not np.all(np.isfinite(value)):
            raise DataError("precipitation values must be finite")
        if value.size and value.min() < 0:
            raise DataError("precipitation values must be nonnegative")
        names, inverse = np.unique(text, return_inverse=True)
        unknown = sorted(set(names.tolist()) - set(self.sites.ids))
        if unknown:
            raise DataError(f"records for unknown stations: {unknown[:5]}")
        lookup = np.array([self.sites.index(s) for s in names.tolist()], dtype=np.int64)
        idx = lookup[inverse.reshape(-1)] if station.size else np.zeros(0, np.int64)
        key = idx * 10 ** 7 + date.astype(np.int64)
        if np.unique(key).size != key.size:
            raise DataError("duplicate (station, date) records")
        for name, arr in (("station", station), ("date", date), ("value", value)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        idx.setflags(write=False)
        object.__setattr__(self, "_site_index", idx)

    def __len__(self):
        return self.value.size

    @property
    def site_index(self) -> np.ndarray:
        return self._site_index

    @property
    def week_index(self) -> np.ndarray:
        """0-based week of year (0..51)."""
        return weeks_of_dates(self.date) - 1

    @property
    def years(self) -> np.ndarray:
        return self.date.astype("datetime64[Y]").astype(int) + 1970

    def subset(self, mask) -> "Dataset":
        mask = np.asarray(mask, dtype=bool)
        return Dataset(self.station[mask], self.date[mask], self.value[mask], self.sites)

    def without_station(self, station_id) -> "Dataset":
        return self.subset(self.station != str(station_id))

    def without_year(self, year: int) -> "Dataset":
        return self.subset(self.years != int(year))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update("|".join(self.sites.ids).encode())
        h.update(np.ascontiguousarray(self.sites.coords, dtype=float).tobytes())
        h.update(self._site_index.tobytes())
        h.update(self.date.astype(np.int64).tobytes())
        h.update(self.value.tobytes())
        return h.hexdigest()[:16]


@dataclass(eq=False)
class StageFit:
    """Posterior summaries of one stage and its station x week predictor."""

    stage: str
    structure: ModelStructure
    result: LaplaceFit
    n_obs: int
    site_ids: tuple
    offset_source: str | None = None
    fit_id: str = ""
    fixed: dict = field(default_factory=dict)

    @property
    def latent(self) -> PosteriorSummary:
        return self.result.latent

    @property
    def hyper(self) -> PosteriorSummary:
        return self.result.hyper

    @property
    def intercept(self) -> float:
        return float(self.latent.mean[0])

    @property
    def spatial(self) -> np.ndarray:
        return self.latent.mean[self.structure.spatial_slice]

    @property
    def weekly(self) -> np.ndarray:
        return self.latent.mean[self.structure.weekly_slice]

    def hyper_mean(self, name: str) -> float:
        return self.hyper.row(name)["mean"]

    def cell_predictor(self) -> np.ndarray:
        """Posterior-mean predictor on the (station, week) grid, offset excluded."""
        return self.intercept + self.spatial[:, None] + self.weekly[None, :]

    def predictor(self, site_index, week_index) -> np.ndarray:
        return self.cell_predictor()[np.asarray(site_index), np.asarray(week_index)]


@dataclass(frozen=True, eq=False)
class ThresholdSurface:
    p_plus: float
    u: np.ndarray
    mu: np.ndarray
    shape: float
    site_ids: tuple
    provenance: str

    def __post_init__(self):
        if not np.all(self.u > 0):
            raise DomainError("threshold surface must be positive")

    def lookup(self, site_index, week_index) -> np.ndarray:
        return self.u[np.asarray(site_index), np.asarray(week_index)]


@dataclass(eq=False)
class QuantilePrediction:
    """Plug-in overall quantiles per (station, week) cell, per target day and per month.

    Cells with ``alpha <= 1 - p_u`` are flagged and carry NaN; a month with any
    flagged day is NaN as well.
    """

    alpha: float
    site_ids: tuple
    cells: np.ndarray
    flagged: np.ndarray
    p_u: np.ndarray
    kappa: np.ndarray
    u: np.ndarray
    xi: float
    q: float
    station: np.ndarray = field(repr=False, default=None)
    date: np.ndarray = field(repr=False, default=None)
    daily: np.ndarray = field(repr=False, default=None)
    monthly: list = field(repr=False, default_factory=list)

    def tail_probability(self, y) -> np.ndarray:
        """Plug-in Pr(Y > y) per cell for an array ``y`` shaped like ``cells``."""
        return composed_survival(y, self.u, self.p_u, self.kappa, self.xi, self.q)


def composed_survival(y, u, p_u, kappa, xi: float, q: float = 0.5) -> np.ndarray:
    """``p_u * (1 - GP(y - u))``, the model tail probability above ``u``."""
    y, u, p_u, kappa = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (y, u, p_u, kappa)))
    excess = np.maximum(y - u, 0.0) / kappa
    return p_u * (1.0 - gp_cdf(excess, GPQuantileParam(1.0, q, xi)))


def overall_quantile(alpha: float, u, p_u, kappa, xi: float, q: float = 0.5):
    """Overall ``alpha``-quantile for ``alpha > 1 - p_u``; NaN elsewhere.

    Returns ``(quantile, flagged)``.
    """
    u, p_u, kappa = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (u, p_u, kappa)))
    flagged = ~(alpha > 1.0 - p_u)
    level = np.where(flagged, 0.5, 1.0 - (1.0 - alpha) / np.where(flagged, 1.0, p_u))
    unit = gp_quantile(level, GPQuantileParam(1.0, q, xi))
    out = np.where(flagged, np.nan, u + kappa * unit)
    return out, flagged


def _stage_model(family, y, site_index, week_index, sites, config: RunConfig, *,
                 fixed, free, offset=0.0):
    structure = assemble_indexed(MaternSpec(config.model.psi_km), CyclicRW2Spec(1.0), sites,
                                 site_index, week_index,
                                 intercept_variance=config.priors.intercept_variance)
    names = (["intercept"] + [f"spatial[{s}]" for s in sites.ids]
             + [f"weekly[{w}]" for w in range(1, N_WEEKS + 1)])
    eng = config.engine
    model = LatentGaussianModel(
        family, y, structure.obs_matrix,
        lambda h: structure.working_precision(h["tau_s"], h["tau_t"]),
        basis=structure.basis, offset=offset,
        hyper_fixed={"tau_t": config.model.tau_t, **fixed}, hyper_free=free, names=names,
        newton_tol=eng.newton_tol, newton_max_iter=eng.newton_max_iter,
    )
    return structure, model


def _run(stage, structure, model, sites, config, offset_source=None) -> StageFit:
    eng = config.engine
    result = fit(model, step=eng.grid_step, drop=eng.grid_drop, max_points=eng.max_grid_points)
    h = hashlib.sha256()
    h.update(stage.encode())
    h.update(result.latent.mean.tobytes())
    h.update(result.hyper.mean.tobytes())
    return StageFit(stage, structure, result, n_obs=model.y.size, site_ids=tuple(sites.ids),
                    offset_source=offset_source, fit_id=h.hexdigest()[:16],
                    fixed=dict(model.hyper_fixed))


def _tau_s_prior(config):
    p = config.priors
    return FreeHyper("tau_s", PrecisionPrior(p.prec_shape, p.prec_rate).logpdf_log, 0.0)


def fit_stage1_gamma(data: Dataset, config: RunConfig) -> StageFit:
    """Gamma regression of the positive intensities; free shape and spatial precision."""
    pos = data.value > 0
    if not pos.any():
        raise DataError("no positive precipitation records to fit the Gamma stage")
    p = config.priors
    free = [FreeHyper("shape", GammaPrior(p.shape_a, p.shape_b).logpdf_log, 0.0), _tau_s_prior(config)]
    structure, model = _stage_model("gamma", data.value[pos], data.site_index[pos], data.week_index[pos],
                                    data.sites, config, fixed={}, free=free)
    return _run("gamma", structure, model, data.sites, config)


def compute_threshold(stage1: StageFit, p_plus: float) -> ThresholdSurface:
    """``p_plus``-quantile of the fitted Gamma per (station, week)."""
    if stage1.stage != "gamma":
        raise DomainError("thresholds come from a Gamma stage fit")
    shape = stage1.hyper_mean("shape")
    mu = np.exp(stage1.cell_predictor())
    # Gamma quantiles scale with the mean at fixed shape.
    unit = gamma_quantile(p_plus, GammaMeanShape(1.0, shape))
    return ThresholdSurface(p_plus=float(p_plus), u=mu * unit, mu=mu, shape=shape,
                            site_ids=stage1.site_ids, provenance=stage1.fit_id)


def _check_cover(data: Dataset, thresholds: ThresholdSurface):
    if tuple(data.sites.ids) != tuple(thresholds.site_ids) or thresholds.u.shape != (len(data.sites), N_WEEKS):
        raise DataError("threshold surface does not cover the stations of the data")


def fit_stage2_bernoulli(data: Dataset, thresholds: ThresholdSurface, config: RunConfig) -> StageFit:
    """Logistic regression of the exceedance indicator over every day, dry days included."""
    _check_cover(data, thresholds)
    z = (data.value > thresholds.lookup(data.site_index, data.week_index)).astype(float)
    structure, model = _stage_model("bernoulli", z, data.site_index, data.week_index, data.sites, config,
                                    fixed={}, free=[_tau_s_prior(config)])
    return _run("bernoulli", structure, model, data.sites, config)


def fit_stage3_gp(data: Dataset, thresholds: ThresholdSurface, stage1: StageFit,
                  config: RunConfig) -> StageFit:
    """GP regression of the excesses with ``log mu`` from Stage 1 as offset."""
    _check_cover(data, thresholds)
    u = thresholds.lookup(data.site_index, data.week_index)
    exc = data.value > u
    n_exc = int(exc.sum())
    eng = config.engine
    if n_exc < eng.min_exceedances:
        raise DataError(f"only {n_exc} threshold exceedances; at least {eng.min_exceedances} are needed")
    if n_exc < eng.warn_exceedances:
        warnings.warn(f"only {n_exc} threshold exceedances; the tail fit will lean on the priors",
                      RuntimeWarning, stacklevel=2)
    si, wi = data.site_index[exc], data.week_index[exc]
    offset = np.log(np.exp(stage1.cell_predictor())[si, wi])
    free = [FreeHyper("xi", xi_prior(config.priors.xi_form, config.priors.xi_rate).logpdf_log, math.log(0.1)),
            _tau_s_prior(config)]
    structure, model = _stage_model("gp", data.value[exc] - u[exc], si, wi, data.sites, config,
                                    fixed={"q": config.model.q}, free=free, offset=offset)
    return _run("gp", structure, model, data.sites, config, offset_source=stage1.fit_id)


def predict_quantile(alpha: float, stage2: StageFit, stage3: StageFit, thresholds: ThresholdSurface,
                     stations=None, dates=None, *, stage1: StageFit | None = None) -> QuantilePrediction:
    """Plug-in quantiles on the cell grid, at target days and as monthly means.

    ``stations`` and ``dates`` list the target days; monthly values are the
    arithmetic mean of the daily predictions over the target days of each
    calendar month (so pass complete months).
    """
    if stage2.stage != "bernoulli" or stage3.stage != "gp":
        raise DomainError("predict_quantile needs a Bernoulli and a GP stage fit")
    if stage1 is not None and stage3.offset_source not in (None, stage1.fit_id):
        raise DataError("GP stage was fitted with a different Stage-1 offset")
    return predict_from_surfaces(
        alpha, thresholds.u, logistic(stage2.cell_predictor()),
        thresholds.mu * np.exp(stage3.cell_predictor()),
        stage3.hyper_mean("xi"), float(stage3.fixed.get("q", 0.5)),
        thresholds.site_ids, stations, dates)


def predict_from_surfaces(alpha, u, p_u, kappa, xi, q, site_ids, stations=None, dates=None) -> QuantilePrediction:
    """:func:`predict_quantile` from the fitted (station, week) surfaces directly."""
    if not 0 < alpha < 1:
        raise DomainError("alpha must lie in (0, 1)")
    cells, flagged = overall_quantile(alpha, u, p_u, kappa, xi, q)
    pred = QuantilePrediction(alpha=float(alpha), site_ids=tuple(site_ids), cells=cells, flagged=flagged,
                              p_u=p_u, kappa=kappa, u=u, xi=float(xi), q=float(q))
    if stations is None:
        return pred
    lookup = {sid: i for i, sid in enumerate(site_ids)}
    try:
        sidx = np.array([lookup[str(sid)] for sid in stations], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"unknown target station {exc.args[0]!r}") from exc
    dates = np.asarray(dates, dtype="datetime64[D]")
    if dates.shape != sidx.shape:
        raise DataError("stations and dates must have equal length")
    widx = weeks_of_dates(dates) - 1
    pred.station = np.array([site_ids[i] for i in sidx], dtype=object)
    pred.date = dates
    pred.daily = cells[sidx, widx]
    pred.monthly = monthly_means(sidx, dates, pred.daily, flagged[sidx, widx], site_ids)
    return pred


def monthly_means(site_index, dates, daily, flagged, site_ids) -> list:
    """Average daily values per (station, calendar month); NaN if any day is flagged."""
    months = np.asarray(dates, dtype="datetime64[D]").astype("datetime64[M]").astype(np.int64)
    order = np.lexsort((months, site_index))
    if order.size == 0:
        return []
    s_sorted, m_sorted = site_index[order], months[order]
    brk = np.flatnonzero((np.diff(s_sorted) != 0) | (np.diff(m_sorted) != 0)) + 1
    start = np.concatenate([[0], brk])
    sums = np.add.reduceat(np.where(flagged[order], 0.0, daily[order]), start)
    counts = np.diff(np.append(start, order.size))
    bad = np.add.reduceat(flagged[order].astype(np.int64), start)
    out = []
    for i0, total, n, nbad in zip(start, sums, counts, bad):
        month = np.datetime64(int(m_sorted[i0]), "M")
        out.append({
            "station_id": site_ids[int(s_sorted[i0])],
            "year": int(str(month)[:4]),
            "month": int(str(month)[5:7]),
            "quantile": float(total / n) if nbad == 0 else math.nan,
            "n_days": int(n), "n_flagged": int(nbad),
        })
    return out


@contextlib.contextmanager
def _stage_errors(tag):
    try:
        yield
    except ConvergenceError as exc:
        raise ConvergenceError(f"[stage {tag}] {exc}", exc.trace) from exc
    except TailRegError as exc:
        raise type(exc)(f"[stage {tag}] {exc}") from exc


@dataclass(eq=False)
class PipelineResult:
    stage1: StageFit
    thresholds: ThresholdSurface
    stage2: StageFit
    stage3: StageFit
    prediction: QuantilePrediction
    config: RunConfig

    @property
    def stages(self):
        return {"gamma": self.stage1, "bernoulli": self.stage2, "gp": self.stage3}


def calendar_targets(sites: SiteSet, first_year: int, last_year: int):
    """Every (station, day) of the given calendar years."""
    days = np.arange(np.datetime64(f"{first_year}-01-01"), np.datetime64(f"{last_year + 1}-01-01"))
    stations = np.repeat(np.array(sites.ids, dtype=object), days.size)
    return stations, np.tile(days, len(sites))


def run_pipeline(data: Dataset, config: RunConfig, *, alpha: float | None = None,
                 stations=None, dates=None) -> PipelineResult:
    """Stages 1-3 in order, then predictions.

    Without explicit targets, predictions cover every site on every day of
    the calendar years spanned by the data.
    """
    if len(data) == 0:
        raise DataError("empty dataset")
    alpha = config.model.alpha if alpha is None else alpha
    with _stage_errors("gamma"):
        s1 = fit_stage1_gamma(data, config)
        thr = compute_threshold(s1, config.model.p_plus)
    with _stage_errors("bernoulli"):
        s2 = fit_stage2_bernoulli(data, thr, config)
    with _stage_errors("gp"):
        s3 = fit_stage3_gp(data, thr, s1, config)
    if stations is None:
        years = data.years
        stations, dates = calendar_targets(data.sites, int(years.min()), int(years.max()))
    with _stage_errors("predict"):
        pred = predict_quantile(alpha, s2, s3, thr, stations, dates, stage1=s1)
    return PipelineResult(s1, thr, s2, s3, pred, config)
