"""Data ingestion, cleaning rules and artifact files.

Formats
-------
data file   ``station_id,date,value_inches`` (ISO dates, header required)
site file   ``station_id,x_km,y_km``
fit file    JSON with posterior tables, diagnostics, thresholds and provenance
predictions ``station_id,year,month,alpha,quantile_inches``
"""
from __future__ import annotations

import csv
import datetime as dt
import json
import math
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import CleaningRule, RunConfig
from .errors import DataError
from .latent_effects import SiteSet
from .tail_distributions import logistic
from .tail_pipeline import Dataset, PipelineResult, QuantilePrediction, StageFit

DATA_HEADER = ["station_id", "date", "value_inches"]
SITE_HEADER = ["station_id", "x_km", "y_km"]
PRED_HEADER = ["station_id", "year", "month", "alpha", "quantile_inches"]
FIT_FORMAT = "tailreg-fit/1"


@dataclass
class ParseReport:
    n_rows: int = 0
    n_accepted: int = 0
    rejected: list = field(default_factory=list)

    def reject(self, line: int, reason: str):
        self.rejected.append({"line": line, "reason": reason})

    def to_dict(self) -> dict:
        counts: dict = {}
        for r in self.rejected:
            counts[r["reason"]] = counts.get(r["reason"], 0) + 1
        return {"rows": self.n_rows, "accepted": self.n_accepted,
                "rejected": len(self.rejected), "by_reason": counts}


def _read_rows(path, header):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    rows = [(i + 1, r) for i, r in enumerate(rows) if any(c.strip() for c in r)]
    if not rows:
        return []
    line, first = rows[0]
    if [c.strip() for c in first] != header:
        raise DataError(f"{path}:{line}: header must be {','.join(header)}")
    for line, r in rows[1:]:
        if len(r) != len(header):
            raise DataError(f"{path}:{line}: expected {len(header)} fields, got {len(r)}")
    return rows[1:]


def read_sites(path) -> SiteSet:
    ids, coords = [], []
    for line, (sid, x, y) in _read_rows(path, SITE_HEADER):
        try:
            coords.append((float(x), float(y)))
        except ValueError as exc:
            raise DataError(f"{path}:{line}: coordinates must be numbers") from exc
        ids.append(sid.strip())
    return SiteSet(ids, np.array(coords, dtype=float).reshape(-1, 2))


def ingest(data_path, site_path) -> tuple[Dataset, ParseReport]:
    """Read and validate the data and site files.

    Negative or non-finite values are rejected row by row and counted in the
    report. Unparsable rows, unknown stations and duplicate keys are errors.
    """
    sites = read_sites(site_path)
    report = ParseReport()
    stations, dates, values = [], [], []
    seen = set()
    for line, (sid, day, val) in _read_rows(data_path, DATA_HEADER):
        report.n_rows += 1
        sid = sid.strip()
        try:
            date = dt.date.fromisoformat(day.strip())
        except ValueError as exc:
            raise DataError(f"{data_path}:{line}: bad date {day!r}") from exc
        try:
            value = float(val)
        except ValueError as exc:
            raise DataError(f"{data_path}:{line}: bad value {val!r}") from exc
        if sid not in sites.ids:
            raise DataError(f"{data_path}:{line}: unknown station {sid!r}")
        if (sid, date) in seen:
            raise DataError(f"{data_path}:{line}: duplicate record for {sid} on {date}")
        if not math.isfinite(value):
            report.reject(line, "non_finite_value")
            continue
        if value < 0:
            report.reject(line, "negative_value")
            continue
        seen.add((sid, date))
        stations.append(sid)
        dates.append(np.datetime64(date, "D"))
        values.append(value)
    report.n_accepted = len(values)
    data = Dataset(np.array(stations, dtype=object), np.array(dates, dtype="datetime64[D]"),
                   np.array(values, dtype=float), sites)
    return data, report


def write_data(data: Dataset, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DATA_HEADER)
        for s, d, v in zip(data.station, data.date, data.value):
            w.writerow([s, str(d), repr(float(v))])


def write_sites(sites: SiteSet, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SITE_HEADER)
        for s, (x, y) in zip(sites.ids, sites.coords):
            w.writerow([s, repr(float(x)), repr(float(y))])


def _constant_runs(data: Dataset, min_run: int) -> np.ndarray:
    """Mask of rows inside runs of >= min_run consecutive days with one repeated value."""
    drop = np.zeros(len(data), dtype=bool)
    day = data.date.astype(np.int64)
    order = np.lexsort((day, data.site_index))
    s, d, v = data.site_index[order], day[order], data.value[order]
    brk = np.ones(len(order), dtype=bool)
    brk[1:] = (s[1:] != s[:-1]) | (d[1:] != d[:-1] + 1) | (v[1:] != v[:-1])
    starts = np.flatnonzero(brk)
    ends = np.append(starts[1:], len(order))
    for a, b in zip(starts, ends):
        if b - a >= min_run:
            drop[order[a:b]] = True
    return drop


def rule_mask(data: Dataset, rule: CleaningRule) -> np.ndarray:
    """Rows removed by one rule."""
    if rule.rule == "drop_station":
        return np.isin(data.station, list(rule.stations))
    if rule.rule == "drop_constant_runs":
        return _constant_runs(data, rule.min_run)
    lo, hi = np.datetime64(str(rule.start), "D"), np.datetime64(str(rule.end), "D")
    mask = (data.date >= lo) & (data.date <= hi)
    if rule.stations:
        mask &= np.isin(data.station, list(rule.stations))
    return mask


def clean(data: Dataset, rules) -> tuple[Dataset, list]:
    """Apply row filters in order; the report lists rows removed by each rule."""
    report = []
    for rule in rules:
        mask = rule_mask(data, rule)
        report.append({"rule": rule.rule, "removed": int(mask.sum())})
        data = data.subset(~mask)
    return data, report


def provenance(config: RunConfig) -> dict:
    return {
        "config_hash": config.config_hash(),
        "versions": {"tailreg": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
    }


def _stage_record(stage: StageFit) -> dict:
    return {
        "stage": stage.stage,
        "fit_id": stage.fit_id,
        "offset_source": stage.offset_source,
        "n_obs": stage.n_obs,
        "fixed": {k: float(v) for k, v in sorted(stage.fixed.items())},
        "latent": stage.latent.to_records(),
        "hyper": stage.hyper.to_records(),
        "diagnostics": stage.result.diagnostics,
    }


def fit_artifact(result: PipelineResult, data: Dataset, extra: dict | None = None) -> dict:
    thr = result.thresholds
    years = data.years
    art = {
        "format": FIT_FORMAT,
        **provenance(result.config),
        "config": result.config.to_dict(),
        "data": {"fingerprint": data.fingerprint(), "rows": len(data),
                 "first_year": int(years.min()), "last_year": int(years.max())},
        "sites": {"ids": list(data.sites.ids), "coords": np.asarray(data.sites.coords).tolist()},
        "threshold": {"p_plus": thr.p_plus, "shape": thr.shape, "provenance": thr.provenance,
                      "u": thr.u.tolist(), "mu": thr.mu.tolist()},
        "stages": {tag: _stage_record(st) for tag, st in result.stages.items()},
    }
    if extra:
        art.update(extra)
    return art


def write_json(obj, path):
    text = json.dumps(obj, indent=1, sort_keys=True, allow_nan=True)
    Path(path).write_text(text + "\n", encoding="utf-8")


def read_fit(path) -> dict:
    try:
        art = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read fit artifact {path}: {exc}") from exc
    if art.get("format") != FIT_FORMAT:
        raise DataError(f"{path} is not a fit artifact")
    return art


def artifact_surfaces(art: dict):
    """``(u, p_u, kappa, xi, q, site_ids)`` rebuilt from a fit artifact."""
    ids = art["sites"]["ids"]
    n = len(ids)

    def cell(tag):
        means = np.array([r["mean"] for r in art["stages"][tag]["latent"]])
        return means[0] + means[1:1 + n][:, None] + means[1 + n:][None, :]

    xi = next(r["mean"] for r in art["stages"]["gp"]["hyper"] if r["name"] == "xi")
    q = art["stages"]["gp"]["fixed"].get("q", 0.5)
    u = np.array(art["threshold"]["u"])
    mu = np.array(art["threshold"]["mu"])
    return u, logistic(cell("bernoulli")), mu * np.exp(cell("gp")), xi, q, ids


def write_predictions(pred: QuantilePrediction, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PRED_HEADER)
        for m in pred.monthly:
            val = "nan" if math.isnan(m["quantile"]) else repr(m["quantile"])
            w.writerow([m["station_id"], m["year"], m["month"], repr(pred.alpha), val])


CV_HEADER = ["Model ID", "psi", "sigma_t", "p_plus", "Space", "Time", "Space-time"]


def write_cv_table(result, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CV_HEADER)
        for row in result.table():
            w.writerow([row[0], f"{row[1]:g}", f"{row[2]:.3f}", f"{row[3]:.2f}",
                        *(repr(float(v)) for v in row[4:])])
