"""Command-line entry point: ``tailreg <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 convergence
error. On failure a one-line JSON error record goes to stderr.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import dataio
from .config import RunConfig, load_config
from .errors import ConfigError, ConvergenceError, DataError, DomainError, TailRegError
from .evaluation import GridConfig, full_grid, rank_models
from .latent_effects import SiteSet
from .pc_priors import PCPriorExact, PCPriorExp
from .simulate import simulate, smooth_truth
from .tail_pipeline import calendar_targets, predict_from_surfaces, run_pipeline

EXIT_CODES = {ConfigError: 2, DomainError: 2, DataError: 3, ConvergenceError: 4}


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    changes = {}
    if getattr(args, "data", None):
        changes["data_path"] = args.data
    if getattr(args, "sites", None):
        changes["site_path"] = args.sites
    if changes:
        cfg = dataclasses.replace(cfg, **changes)
    return cfg


def _load_data(cfg: RunConfig):
    if not cfg.data_path or not cfg.site_path:
        raise ConfigError("data_path and site_path are required (config file or --data/--sites)")
    data, report = dataio.ingest(cfg.data_path, cfg.site_path)
    data, cleaning = dataio.clean(data, cfg.cleaning)
    return data, {"parse": report.to_dict(), "cleaning": cleaning}


def cmd_fit(args):
    cfg = _config(args)
    data, reports = _load_data(cfg)
    result = run_pipeline(data, cfg, stations=[], dates=[])
    dataio.write_json(dataio.fit_artifact(result, data, {"reports": reports}), args.out)
    return 0


def cmd_predict(args):
    art = dataio.read_fit(args.fit)
    alpha = args.alpha if args.alpha is not None else art["config"]["model"]["alpha"]
    u, p_u, kappa, xi, q, ids = dataio.artifact_surfaces(art)
    first = args.first_year or art["data"]["first_year"]
    last = args.last_year or art["data"]["last_year"]
    sites = SiteSet(ids, art["sites"]["coords"])
    stations, dates = calendar_targets(sites, first, last)
    pred = predict_from_surfaces(alpha, u, p_u, kappa, xi, q, ids, stations, dates)
    dataio.write_predictions(pred, args.out)
    n_flag = sum(m["n_flagged"] > 0 for m in pred.monthly)
    if n_flag:
        print(f"{n_flag} station-months flagged: alpha not above 1 - p_u", file=sys.stderr)
    return 0


def _grid(args, cfg: RunConfig):
    if args.grid == "paper":
        return full_grid()
    if args.grid == "config":
        m = cfg.model
        return [GridConfig(1, m.psi_km, m.sigma_t, m.p_plus)]
    try:
        raw = json.loads(Path(args.grid).read_text(encoding="utf-8"))
        return [GridConfig(int(r.get("model_id", i + 1)), float(r["psi"]), float(r["sigma_t"]), float(r["p_plus"]))
                for i, r in enumerate(raw)]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"cannot read model grid {args.grid}: {exc}") from exc


def cmd_cv(args):
    cfg = _config(args)
    grid = _grid(args, cfg)
    if args.list:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["Model ID", "psi", "sigma_t", "p_plus"])
            for g in sorted(grid, key=lambda g: g.model_id):
                w.writerow([g.model_id, f"{g.psi:g}", f"{g.sigma_t:.3f}", f"{g.p_plus:.2f}"])
        return 0
    data, _ = _load_data(cfg)
    result = rank_models(grid, data, cfg, workers=args.workers)
    dataio.write_cv_table(result, args.out)
    if args.json:
        detail = {
            "provenance": dataio.provenance(cfg),
            "rows": [r.__dict__ for r in result.rows],
            "failed": {str(k): {ax: v[ax].failed for ax in ("space", "time")} for k, v in result.details.items()},
        }
        dataio.write_json(detail, args.json)
    return 0


def cmd_simulate(args):
    cfg = load_config(args.config)
    rng = np.random.default_rng(cfg.seed if args.seed is None else args.seed)
    ids = [f"S{i + 1:02d}" for i in range(args.stations)]
    sites = SiteSet(ids, rng.uniform(0.0, args.extent_km, (args.stations, 2)))
    truth = smooth_truth(sites, args.first_year, args.last_year, xi=args.xi, p_plus=cfg.model.p_plus)
    seed = cfg.seed if args.seed is None else args.seed
    data, record = simulate(truth, seed=seed + 1)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataio.write_data(data, out / "data.csv")
    dataio.write_sites(sites, out / "sites.csv")
    record.update(dataio.provenance(cfg))
    dataio.write_json(record, out / "truth.json")
    return 0


def cmd_prior_table(args):
    if args.form == "exact":
        prior = PCPriorExact(args.lam)
        # Cubic map packs points near 1 where the density has its steep edge.
        t = np.linspace(0.0, 1.0, args.points)
        xi = 1.0 - (1.0 - t) ** 3
        dens = prior.pdf(xi)
    else:
        prior = PCPriorExp(math.sqrt(2.0) * args.lam)
        upper = args.upper if args.upper else 40.0 / prior.rate
        xi = np.linspace(0.0, upper, args.points)
        dens = prior.pdf(xi)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["xi", "density"])
        for a, b in zip(xi, dens):
            w.writerow([repr(float(a)), repr(float(b))])
    return 0


def cmd_report(args):
    art = dataio.read_fit(args.fit)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "effects.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "component", "mean", "sd", "lower", "upper"])
        for tag, st in art["stages"].items():
            for r in st["latent"]:
                w.writerow([tag, r["name"], r["mean"], r["sd"], r["lower"], r["upper"]])
    with open(out / "hyperparameters.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "name", "mean", "sd", "lower", "upper"])
        for tag, st in art["stages"].items():
            for r in st["hyper"]:
                w.writerow([tag, r["name"], r["mean"], r["sd"], r["lower"], r["upper"]])
    dataio.write_json({"config_hash": art["config_hash"], "versions": art["versions"],
                       "diagnostics": {t: s["diagnostics"] for t, s in art["stages"].items()}},
                      out / "diagnostics.json")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tailreg", description="Three-stage Bayesian tail regression for precipitation.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="YAML run configuration")
        if data:
            sp.add_argument("--data", help="data CSV (overrides config)")
            sp.add_argument("--sites", help="site CSV (overrides config)")

    sp = sub.add_parser("fit", help="fit the three stages and write a fit artifact")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("predict", help="monthly quantile predictions from a fit artifact")
    sp.add_argument("--fit", required=True)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--first-year", type=int)
    sp.add_argument("--last-year", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("cv", help="cross-validate and rank model configurations")
    common(sp)
    sp.add_argument("--grid", default="config",
                    help="'paper' (the full 500-config grid), 'config', or a JSON list of {psi, sigma_t, p_plus}")
    sp.add_argument("--workers", type=int)
    sp.add_argument("--list", action="store_true", help="only enumerate the grid")
    sp.add_argument("--json", help="also write per-fold details here")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_cv)

    sp = sub.add_parser("simulate", help="write a synthetic data set with its truth record")
    common(sp, data=False)
    sp.add_argument("--stations", type=int, default=10)
    sp.add_argument("--first-year", type=int, default=2000)
    sp.add_argument("--last-year", type=int, default=2009)
    sp.add_argument("--extent-km", type=float, default=150.0)
    sp.add_argument("--xi", type=float, default=0.2)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("prior-table", help="tabulate a PC prior density for the tail index")
    sp.add_argument("--form", choices=("exact", "exp"), default="exact")
    sp.add_argument("--lambda", dest="lam", type=float, default=10.6)
    sp.add_argument("--points", type=int, default=20001)
    sp.add_argument("--upper", type=float, help="grid end for the exponential form")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_prior_table)

    sp = sub.add_parser("report", help="effect and hyperparameter tables from a fit artifact")
    sp.add_argument("--fit", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def _exit_code(exc) -> int:
    for cls, code in EXIT_CODES.items():
        if isinstance(exc, cls):
            return code
    return 3


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TailRegError as exc:
        code = _exit_code(exc)
        record = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
        print(json.dumps(record), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
