"""Run configuration: nested dataclasses loaded from YAML.

Every key has a default, so an empty file (or no file) is a valid config.
Schema, with defaults::

    data_path: null          # station_id,date,value_inches
    site_path: null          # station_id,x_km,y_km
    seed: 0
    model:
      p_plus: 0.92
      psi_km: 50.0
      sigma_t: 0.01          # tau_t = sigma_t ** -2
      alpha: 0.998
      q: 0.5
    priors:
      xi_form: exp           # exp | exact
      xi_rate: 15.0          # rate of the exponential prior; lambda-tilde of the exact one
      shape_a: 2.0           # Gamma prior on the Gamma-likelihood shape
      shape_b: 2.0
      prec_shape: 1.0        # Gamma prior on the spatial precision
      prec_rate: 5.0e-5
      intercept_variance: 1000.0
    engine:
      grid_step: 0.75
      grid_drop: 6.0
      max_grid_points: 10000
      newton_tol: 1.0e-8
      newton_max_iter: 100
      min_exceedances: 30
      warn_exceedances: 200
    cv:
      eval_stations: null    # null = every station
      years: null            # null = every year present
      alpha: 0.998
      workers: 1
      time_folds: year       # year | month (calendar months, restricted to cv.years)
    cleaning:                # applied in order
      - {rule: drop_station, stations: [s32]}
      - {rule: drop_constant_runs, min_run: 30}
      - {rule: drop_range, start: 1977-01-01, end: 1995-12-31, stations: [s7]}
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    p_plus: float = 0.92
    psi_km: float = 50.0
    sigma_t: float = 0.01
    alpha: float = 0.998
    q: float = 0.5

    def __post_init__(self):
        for name in ("p_plus", "alpha", "q"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"model.{name} must lie in (0, 1), got {v}")
        if not self.sigma_t > 0:
            raise ConfigError("model.sigma_t must be positive")
        if not self.psi_km > 0:
            raise ConfigError("model.psi_km must be positive")

    @property
    def tau_t(self) -> float:
        return self.sigma_t ** -2


@dataclass(frozen=True)
class PriorConfig:
    xi_form: str = "exp"
    xi_rate: float = 15.0
    shape_a: float = 2.0
    shape_b: float = 2.0
    prec_shape: float = 1.0
    prec_rate: float = 5e-5
    intercept_variance: float = 1000.0

    def __post_init__(self):
        if self.xi_form not in ("exp", "exact"):
            raise ConfigError(f"priors.xi_form must be 'exp' or 'exact', got {self.xi_form!r}")
        for name in ("xi_rate", "shape_a", "shape_b", "prec_shape", "prec_rate", "intercept_variance"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"priors.{name} must be positive")


@dataclass(frozen=True)
class EngineConfig:
    grid_step: float = 0.75
    grid_drop: float = 6.0
    max_grid_points: int = 10_000
    newton_tol: float = 1e-8
    newton_max_iter: int = 100
    min_exceedances: int = 30
    warn_exceedances: int = 200

    def __post_init__(self):
        if not (self.grid_step > 0 and self.grid_drop > 0 and self.max_grid_points >= 1):
            raise ConfigError("engine grid settings must be positive")


@dataclass(frozen=True)
class CVConfig:
    eval_stations: tuple | None = None
    years: tuple | None = None
    alpha: float = 0.998
    workers: int = 1
    time_folds: str = "year"

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("cv.alpha must lie in (0, 1)")
        if self.time_folds not in ("year", "month"):
            raise ConfigError("cv.time_folds must be 'year' or 'month'")
        if self.workers < 1:
            raise ConfigError("cv.workers must be at least 1")
        if self.eval_stations is not None:
            object.__setattr__(self, "eval_stations", tuple(str(s) for s in self.eval_stations))
        if self.years is not None:
            object.__setattr__(self, "years", tuple(int(y) for y in self.years))


@dataclass(frozen=True)
class CleaningRule:
    rule: str
    stations: tuple = ()
    min_run: int = 30
    start: str | None = None
    end: str | None = None

    RULES = ("drop_station", "drop_constant_runs", "drop_range")

    def __post_init__(self):
        if self.rule not in self.RULES:
            raise ConfigError(f"unknown cleaning rule {self.rule!r}")
        object.__setattr__(self, "stations", tuple(str(s) for s in self.stations))
        if self.rule == "drop_station" and not self.stations:
            raise ConfigError("drop_station needs a station list")
        if self.rule == "drop_constant_runs" and self.min_run < 2:
            raise ConfigError("drop_constant_runs needs min_run >= 2")
        if self.rule == "drop_range" and (self.start is None or self.end is None):
            raise ConfigError("drop_range needs start and end dates")


@dataclass(frozen=True)
class RunConfig:
    data_path: str | None = None
    site_path: str | None = None
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    priors: PriorConfig = field(default_factory=PriorConfig)
    engine: EngineConfig = field(default_factory=EngineConfig)
    cv: CVConfig = field(default_factory=CVConfig)
    cleaning: tuple = ()

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self), default=str))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_model(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, model=dataclasses.replace(self.model, **changes))


_SECTIONS = {"model": ModelConfig, "priors": PriorConfig, "engine": EngineConfig, "cv": CVConfig}


def _build(cls, raw, where):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"unknown keys in {where}: {sorted(extra)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"bad value in {where}: {exc}") from exc


def config_from_dict(raw: dict | None) -> RunConfig:
    raw = dict(raw or {})
    top = {f.name for f in dataclasses.fields(RunConfig)}
    extra = set(raw) - top
    if extra:
        raise ConfigError(f"unknown top-level keys: {sorted(extra)}")
    kwargs = {k: _build(cls, raw.get(k), k) for k, cls in _SECTIONS.items()}
    rules = raw.get("cleaning") or []
    if not isinstance(rules, list):
        raise ConfigError("cleaning must be a list of rules")
    kwargs["cleaning"] = tuple(_build(CleaningRule, r, "cleaning rule") for r in rules)
    for key in ("data_path", "site_path"):
        if raw.get(key) is not None:
            kwargs[key] = str(raw[key])
    if "seed" in raw:
        try:
            kwargs["seed"] = int(raw["seed"])
        except (TypeError, ValueError) as exc:
            raise ConfigError("seed must be an integer") from exc
    return RunConfig(**kwargs)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    return config_from_dict(raw)
