"""Quantile loss, hold-out cross-validation and model ranking.

A *predictor* is any picklable callable
``predictor(train, config, stations, dates, alpha) -> daily quantiles``.
The default refits the full three-stage pipeline on the training rows.
Tests inject simpler ones.
"""
from __future__ import annotations

import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig
from .errors import DataError, TailRegError
from .tail_pipeline import Dataset, run_pipeline

GRID_PSI = (25.0, 50.0, 75.0, 100.0, 125.0, 150.0, 175.0, 200.0, 225.0, 250.0)
GRID_SIGMA_T = (0.005, 0.010, 0.015, 0.020, 0.025)
GRID_P_PLUS = (0.90, 0.91, 0.92, 0.93, 0.94, 0.95, 0.96, 0.97, 0.98, 0.99)


def quantile_loss(y, qhat, alpha: float):
    """Pinball loss: ``alpha (y - q)`` above the prediction, ``(1 - alpha)(q - y)`` below."""
    d = np.asarray(y, dtype=float) - np.asarray(qhat, dtype=float)
    out = np.where(d > 0, alpha * d, (alpha - 1.0) * d)
    return float(out) if out.ndim == 0 else out


def pipeline_predictor(train: Dataset, config: RunConfig, stations, dates, alpha: float) -> np.ndarray:
    return run_pipeline(train, config, alpha=alpha, stations=stations, dates=dates).prediction.daily


@dataclass(frozen=True)
class GridConfig:
    model_id: int
    psi: float
    sigma_t: float
    p_plus: float

    def apply(self, config: RunConfig) -> RunConfig:
        return config.with_model(psi_km=self.psi, sigma_t=self.sigma_t, p_plus=self.p_plus)


def full_grid() -> list[GridConfig]:
    """The 10 x 5 x 10 grid; ids run over psi fastest, then p_plus, then sigma_t."""
    out = []
    for (i, s), (j, p), (k, psi) in itertools.product(enumerate(GRID_SIGMA_T), enumerate(GRID_P_PLUS),
                                                      enumerate(GRID_PSI)):
        out.append(GridConfig(1 + k + 10 * j + 100 * i, psi, s, p))
    return out


@dataclass(frozen=True)
class CVPlan:
    axis: str
    folds: tuple
    eval_stations: tuple
    alpha: float = 0.998

    def __post_init__(self):
        if self.axis not in ("station", "year", "month"):
            raise DataError(f"unknown hold-out axis {self.axis!r}")
        if len(set(self.folds)) != len(self.folds):
            raise DataError("folds must be distinct")


def _month_keys(data: Dataset) -> np.ndarray:
    return data.date.astype("datetime64[M]").astype(str)


def make_plan(data: Dataset, axis: str, config: RunConfig) -> CVPlan:
    """Plan from the ``cv`` section: evaluation stations and time folds default to all present.

    ``axis`` is ``station``, ``year``, ``month`` or ``time`` (the configured time unit).
    """
    cv = config.cv
    present = sorted(set(data.station.tolist()))
    stations = tuple(cv.eval_stations) if cv.eval_stations is not None else tuple(present)
    missing = set(stations) - set(data.sites.ids)
    if missing:
        raise DataError(f"evaluation stations not in the site set: {sorted(missing)}")
    if axis == "time":
        axis = cv.time_folds
    years = tuple(cv.years) if cv.years is not None else tuple(int(y) for y in np.unique(data.years))
    if axis == "station":
        folds = stations
    elif axis == "year":
        folds = years
    else:
        keep = np.isin(data.years, years)
        folds = tuple(str(m) for m in np.unique(_month_keys(data)[keep]))
    return CVPlan(axis, folds, stations, cv.alpha)


@dataclass
class CVScore:
    """Summed loss over the folds that succeeded; NaN when every fold failed."""

    total: float
    folds: dict
    failed: dict = field(default_factory=dict)

    @property
    def completeness(self) -> float:
        n = len(self.folds) + len(self.failed)
        return len(self.folds) / n if n else 1.0


def _split(data: Dataset, plan: CVPlan, fold):
    if plan.axis == "station":
        train = data.without_station(fold)
        test = data.subset(data.station == str(fold))
        leaked = np.any(train.station == str(fold))
    else:
        if plan.axis == "year":
            held = data.years == int(fold)
        else:
            held = _month_keys(data) == str(fold)
        train = data.subset(~held)
        test = data.subset(held & np.isin(data.station, plan.eval_stations))
        # Hold-out hygiene: no held-out row reaches the fit.
        train_keys = train.years == int(fold) if plan.axis == "year" else _month_keys(train) == str(fold)
        leaked = np.any(train_keys)
    if leaked:
        raise AssertionError(f"held-out fold {fold!r} leaked into the training rows")
    return train, test


def _fold_task(args):
    data, plan, fold, config, predictor = args
    train, test = _split(data, plan, fold)
    if len(test) == 0:
        return fold, 0.0, None
    try:
        pred = np.asarray(predictor(train, config, test.station, test.date, plan.alpha), dtype=float)
    except TailRegError as exc:
        return fold, math.nan, f"{type(exc).__name__}: {exc}"
    if pred.shape != test.value.shape or not np.all(np.isfinite(pred)):
        return fold, math.nan, "prediction missing or flagged for held-out days"
    return fold, float(np.sum(quantile_loss(test.value, pred, plan.alpha))), None


def _collect(results) -> CVScore:
    folds, failed = {}, {}
    for fold, score, err in sorted(results, key=lambda r: str(r[0])):
        if err is None:
            folds[fold] = score
        else:
            failed[fold] = err
    total = 0.0
    for fold in sorted(folds, key=str):
        total += folds[fold]
    if failed and not folds:
        total = math.nan
    return CVScore(total, folds, failed)


def _map(tasks, workers):
    if workers <= 1 or len(tasks) <= 1:
        return [_fold_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_fold_task, tasks))


def cv_score(data: Dataset, config: RunConfig, plan: CVPlan, predictor: Callable = pipeline_predictor,
             workers: int | None = None) -> CVScore:
    workers = config.cv.workers if workers is None else workers
    tasks = [(data, plan, fold, config, predictor) for fold in plan.folds]
    return _collect(_map(tasks, workers))


def cv_space(data: Dataset, config: RunConfig, plan: CVPlan | None = None,
             predictor: Callable = pipeline_predictor, workers: int | None = None) -> CVScore:
    """Leave-one-station-out: refit without the station, score all of its days."""
    plan = make_plan(data, "station", config) if plan is None else plan
    if plan.axis != "station":
        raise DataError("cv_space needs a station plan")
    return cv_score(data, config, plan, predictor, workers)


def cv_time(data: Dataset, config: RunConfig, plan: CVPlan | None = None,
            predictor: Callable = pipeline_predictor, workers: int | None = None) -> CVScore:
    """Leave-one-year-out (or one month): refit without it, score the evaluation stations in it."""
    plan = make_plan(data, "time", config) if plan is None else plan
    if plan.axis == "station":
        raise DataError("cv_time needs a year or month plan")
    return cv_score(data, config, plan, predictor, workers)


@dataclass(frozen=True)
class CVRow:
    model_id: int
    psi: float
    sigma_t: float
    p_plus: float
    space: float
    time: float
    spacetime: float
    completeness: float


@dataclass
class CVResult:
    rows: list
    details: dict = field(default_factory=dict)

    @property
    def ranking(self) -> list:
        return [r.model_id for r in self.rows]

    HEADER = ("model_id", "psi", "sigma_t", "p_plus", "space", "time", "space_time")

    def table(self) -> list:
        return [(r.model_id, r.psi, r.sigma_t, r.p_plus, r.space, r.time, r.spacetime) for r in self.rows]


def _rank_key(row: CVRow):
    # A partial sum over fewer folds is not comparable, so incomplete configs go after complete ones.
    bad = math.isnan(row.spacetime)
    return (bad, row.completeness < 1.0, 0.0 if bad else row.spacetime, row.model_id)


def rank_models(grid: Sequence[GridConfig], data: Dataset, config: RunConfig, *,
                predictor: Callable = pipeline_predictor, workers: int | None = None,
                space_plan: CVPlan | None = None, time_plan: CVPlan | None = None) -> CVResult:
    """Score every grid configuration on both hold-out axes; rank by the sum, lowest first.

    All (config, fold) pairs go into one task list so a process pool can
    work through them in any order; results are merged by sorted keys.
    """
    if not grid:
        raise DataError("empty model grid")
    space_plan = space_plan or make_plan(data, "station", config)
    time_plan = time_plan or make_plan(data, "time", config)
    if space_plan.axis != "station" or time_plan.axis == "station":
        raise DataError("rank_models needs a station plan and a time plan")
    workers = config.cv.workers if workers is None else workers
    tasks, owners = [], []
    for g in grid:
        cfg = g.apply(config)
        for plan in (space_plan, time_plan):
            for fold in plan.folds:
                tasks.append((data, plan, fold, cfg, predictor))
                owners.append((g.model_id, "space" if plan is space_plan else "time"))
    results = _map(tasks, workers)
    buckets: dict = {}
    for owner, res in zip(owners, results):
        buckets.setdefault(owner, []).append(res)
    rows, details = [], {}
    for g in grid:
        space = _collect(buckets.get((g.model_id, "space"), []))
        time = _collect(buckets.get((g.model_id, "time"), []))
        n_ok = len(space.folds) + len(time.folds)
        n_all = n_ok + len(space.failed) + len(time.failed)
        rows.append(CVRow(g.model_id, g.psi, g.sigma_t, g.p_plus, space.total, time.total,
                          space.total + time.total, n_ok / n_all if n_all else 1.0))
        details[g.model_id] = {"space": space, "time": time}
    rows.sort(key=_rank_key)
    return CVResult(rows, details)
