"""Command-line interface: ``geodisagg {fit,predict,simulate,score}``.

Every command reads an optional ``key=value`` config file (``--config``)
whose dotted keys are listed in :data:`CONFIG_KEYS`; ``--set key=value``
overrides single keys.  Outputs go to ``--out``.  They are staged in a
temporary directory and moved into place only when the command succeeds,
so a failed run leaves no partial files behind.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import basis, geometry, inference, model, predict, sim, tables
from .errors import GeodisaggError, InputError

log = logging.getLogger("geodisagg")

EXIT_OK, EXIT_ERROR, EXIT_USAGE = 0, 1, 2


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _names(text: str) -> tuple[str, ...]:
    return tuple(s.strip() for s in text.split(",") if s.strip())


def _choice(options):
    def conv(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text
    return conv


def _opt_float(text):
    return None if text.strip().lower() in ("", "none") else float(text)


def _opt_int(text):
    return None if text.strip().lower() in ("", "none", "auto") else int(text)


# key -> (converter, default)
CONFIG_KEYS = {
    "data.cells": (str, "cells.csv"),
    "data.membership": (str, "membership.csv"),
    "data.areas": (str, "areas.csv"),
    "data.targets": (str, ""),
    "model.family": (_choice(basis.FAMILIES), "matern32"),
    "model.estimator": (_choice(geometry.ESTIMATORS), "approximate"),
    "model.weighting": (_choice(geometry.WEIGHTINGS), "population"),
    "model.linear": (_names, ()),
    "model.smooth": (_names, ()),
    "model.spline_k": (int, 15),
    "model.spline_degree": (int, 3),
    "model.penalty_order": (int, 2),
    "model.knots": (_opt_int, None),
    "prior.zeta": (float, 1e-5),
    "prior.nu": (float, 3.0),
    "prior.a_delta": (float, 1e-5),
    "prior.b_delta": (float, 1e-5),
    "fit.restarts": (int, 25),
    "fit.seed": (int, 0),
    "fit.maxfev": (int, 400),
    "fit.bound_range": (_bool, True),
    "predict.fit_dir": (str, ""),
    "predict.draws": (int, predict.DEFAULT_DRAWS),
    "predict.seed": (int, 0),
    "predict.threshold": (_opt_float, None),
    "predict.error_term": (_choice(predict.ERROR_TERMS), "grid"),
    "predict.center_spatial": (_bool, True),
    "predict.curve_max": (float, 30.0),
    "predict.curve_points": (int, 31),
    "sim.scenario": (_choice(tuple(sim.SCENARIO_RANGE)), "a"),
    "sim.area_size": (int, 20),
    "sim.replicates": (int, 20),
    "sim.seed": (int, 0),
    "sim.domain": (int, 100),
    "sim.restarts": (int, 25),
    "sim.draws": (int, predict.DEFAULT_DRAWS),
    "sim.error_term": (_choice(predict.ERROR_TERMS), "grid"),
    "sim.data_only": (_bool, False),
    "score.truth_dir": (str, "."),
    "score.pred_dir": (str, "."),
}

PATH_KEYS = {"data.cells", "data.membership", "data.areas", "data.targets", "predict.fit_dir",
             "score.truth_dir", "score.pred_dir"}


@dataclass
class RunConfig:
    command: str
    values: dict
    out: Path
    threads: int
    base: Path | None = None
    provided: set = field(default_factory=set)

    def __getitem__(self, key):
        return self.values[key]

    def path(self, key) -> Path:
        return tables.resolve_path(self.values[key], self.base)

    def model_spec(self) -> model.ModelSpec:
        spline = basis.SplineBasisSpec(K=self["model.spline_k"], degree=self["model.spline_degree"],
                                       penalty_order=self["model.penalty_order"])
        return model.ModelSpec(
            linear_covariates=self["model.linear"],
            smooth_covariates={name: spline for name in self["model.smooth"]},
            family=self["model.family"],
            n_knots=self["model.knots"],
            estimator=self["model.estimator"],
            weighting=self["model.weighting"],
            priors=model.PriorSpec(self["prior.zeta"], self["prior.nu"], self["prior.a_delta"],
                                   self["prior.b_delta"]),
        )


class UsageError(Exception):
    pass


def _convert(key, text, where):
    if key not in CONFIG_KEYS:
        raise UsageError(f"{where}: unknown config key {key!r}")
    conv = CONFIG_KEYS[key][0]
    try:
        return conv(text)
    except ValueError as exc:
        raise UsageError(f"{where}: bad value for {key}: {exc}") from None


def build_config(args) -> RunConfig:
    values = {k: d for k, (_, d) in CONFIG_KEYS.items()}
    provided = set()
    base = None
    if args.config:
        cfg_path = Path(args.config)
        try:
            raw = tables.read_config(cfg_path)
        except InputError as exc:
            raise UsageError(str(exc)) from None
        base = cfg_path.resolve().parent
        for key, (text, line) in raw.items():
            values[key] = _convert(key, text, f"{cfg_path} (line {line})")
            provided.add(key)
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, text = (s.strip() for s in item.split("=", 1))
        values[key] = _convert(key, text, "--set")
        provided.add(key)
    # dedicated flags win over the config file
    if args.seed is not None:
        for key in ("fit.seed", "predict.seed", "sim.seed"):
            values[key] = args.seed
    if args.estimator is not None:
        values["model.estimator"] = args.estimator
    if getattr(args, "scenario", None) is not None:
        values["sim.scenario"] = args.scenario
    if getattr(args, "area_size", None) is not None:
        values["sim.area_size"] = args.area_size
    if getattr(args, "replicates", None) is not None:
        values["sim.replicates"] = args.replicates
    if getattr(args, "data_only", False):
        values["sim.data_only"] = True
    threads = args.threads
    if threads is None:
        env = os.environ.get("GEODISAGG_THREADS")
        if env:
            try:
                threads = int(env)
            except ValueError:
                raise UsageError(f"GEODISAGG_THREADS must be an integer, got {env!r}") from None
        else:
            threads = os.cpu_count() or 1
    if threads < 1:
        raise UsageError("thread count must be at least 1")
    rc = RunConfig(args.command, values, Path(args.out), threads, base, provided)
    if rc.command in ("fit", "predict"):
        try:
            rc.model_spec()
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    if rc.command == "simulate" and values["sim.domain"] % values["sim.area_size"]:
        raise UsageError(f"area size {values['sim.area_size']} does not divide domain {values['sim.domain']}")
    return rc


# -- commands ----------------------------------------------------------------

def _load_problem(rc: RunConfig):
    return tables.read_problem(rc.path("data.cells"), rc.path("data.membership"), rc.path("data.areas"))


def _hyper_names(spec: model.ModelSpec) -> list[str]:
    return [*spec.smooth_covariates, "spatial", "error"]


def cmd_fit(rc: RunConfig, stage: Path):
    problem = _load_problem(rc)
    spec = rc.model_spec()
    fitted = inference.fit(problem, spec, seed=rc["fit.seed"], restarts=rc["fit.restarts"],
                           threads=rc.threads, maxfev=rc["fit.maxfev"], bound_range=rc["fit.bound_range"])
    names = _hyper_names(spec)
    h = fitted.hyper
    rows = [(f"v_{n}", v) for n, v in zip(names, h.v)] + [("v_rho", h.v_rho)]
    rows += [(f"lambda_{n}", v) for n, v in zip(names, h.lam)]
    rows += [("rho", h.rho), ("range", 1.0 / h.rho), ("objective", fitted.objective),
             ("failed_restarts", fitted.n_failed), ("newton_converged", fitted.laplace.converged)]
    tables.write_csv(stage / "hyperparameters.csv", ["name", "value"], rows)
    table = fitted.restarts
    cols = ["restart", "init_v_rho", "objective", "n_evals", "converged",
            *[f"v{j + 1}" for j in range(len(names))], "v_rho", "message"]
    tables.write_csv(stage / "fit_report.csv", cols, ([r[c] for c in cols] for r in table))
    k = fitted.model.knots.knots
    tables.write_columns(stage / "knots.csv", {"knot": np.arange(len(k)), "x": k[:, 0], "y": k[:, 1]})
    coef = fitted.laplace.mode
    sd = np.sqrt(np.diag(fitted.laplace.cov))
    beta_names = ["intercept", *spec.linear_covariates, "coord_x", "coord_y"]
    lay = fitted.model.layout
    tables.write_columns(stage / "fixed_effects.csv", {
        "term": beta_names, "mode": coef[lay.beta], "sd": sd[lay.beta]})
    log.info("fit: objective %.6f, range %.4g", fitted.objective, 1.0 / h.rho)


def _read_fit(fit_dir: Path, spec: model.ModelSpec):
    hp = fit_dir / "hyperparameters.csv"
    _, cols, lines = tables.read_table(hp, {"name": "str", "value": "str"})
    vals = dict(zip(cols["name"], zip(cols["value"], lines)))
    names = _hyper_names(spec)
    v = []
    for key in [f"v_{n}" for n in names] + ["v_rho"]:
        if key not in vals:
            raise InputError(f"missing hyperparameter {key!r} (was the fit run with the same model?)", hp)
        text, line = vals[key]
        try:
            v.append(float(text))
        except ValueError:
            raise InputError(f"expected float, got {text!r}", hp, line, "value") from None
    _, kc, _ = tables.read_table(fit_dir / "knots.csv", {"knot": "int", "x": "float", "y": "float"})
    knots = basis.KnotSet(np.column_stack([kc["x"], kc["y"]]))
    return inference.Hyperparameters.from_vector(v), knots


def cmd_predict(rc: RunConfig, stage: Path):
    problem = _load_problem(rc)
    spec = rc.model_spec()
    fit_dir = rc.path("predict.fit_dir") if rc["predict.fit_dir"] else rc.out
    hyper, knots = _read_fit(fit_dir, spec)
    mod = model.assemble(problem, spec, knots=knots)
    fitted = inference.refit_at(mod, hyper)
    draws = predict.sample_posterior(fitted.laplace, rc["predict.draws"], rc["predict.seed"])
    thr = rc["predict.threshold"]
    grid = predict.predict_grid(fitted, draws, threshold=thr, error_term=rc["predict.error_term"],
                                seed=rc["predict.seed"], center_spatial=rc["predict.center_spatial"])
    cols = {"cell_id": problem.cell_ids, "median": grid.median, "lower": grid.lower, "upper": grid.upper}
    if thr is not None:
        cols["exceedance"] = grid.exceedance
    cols.update({"spatial_median": grid.spatial_median, "spatial_lower": grid.spatial_lower,
                 "spatial_upper": grid.spatial_upper})
    tables.write_columns(stage / "grid_summary.csv", cols)
    _write_areas(stage / "area_summary.csv", predict.aggregate_areas(fitted, draws, seed=rc["predict.seed"]))
    if rc["data.targets"]:
        t_area, t_cell, t_cov = tables.read_targets(rc.path("data.targets"))
        et = "grid" if rc["predict.error_term"] == "grid" else "area"
        s = predict.aggregate_areas(fitted, draws, t_area, t_cell, t_cov, seed=rc["predict.seed"],
                                    error_term=et)
        _write_areas(stage / "target_summary.csv", s)
    d = np.linspace(0.0, rc["predict.curve_max"], rc["predict.curve_points"])
    tables.write_columns(stage / "correlation.csv",
                         {"distance": d, "correlation": predict.correlation_curve(fitted, d)})


def _write_areas(path, s: predict.AreaSummary):
    tables.write_columns(path, {
        "area_id": s.area_ids, "median": s.median, "lower": s.lower, "upper": s.upper,
        "pred_lower": s.pred_lower, "pred_median": s.pred_median, "pred_upper": s.pred_upper})


def _scenario_config(rc: RunConfig) -> sim.ScenarioConfig:
    return sim.scenario(rc["sim.scenario"], rc["sim.area_size"], domain=rc["sim.domain"],
                        replicates=rc["sim.replicates"], seed=rc["sim.seed"],
                        n_knots=rc["model.knots"] if "model.knots" in rc.provided else None,
                        estimator=rc["model.estimator"], family=rc["model.family"],
                        restarts=rc["sim.restarts"], draws=rc["sim.draws"],
                        error_term=rc["sim.error_term"])


def cmd_simulate(rc: RunConfig, stage: Path):
    cfg = _scenario_config(rc)
    if rc["sim.data_only"]:
        problem, truth = sim.simulate_dataset(cfg, cfg.seed)
        tables.write_problem(problem, stage)
        tables.write_columns(stage / "truth_cells.csv", {
            "cell_id": problem.cell_ids, "spatial": truth.spatial, "x1": truth.x1,
            "intensity": truth.intensity, "count": truth.cell_counts})
        tables.write_columns(stage / "truth_areas.csv", {"area_id": problem.area_ids, "mean": truth.area_mean})
        return
    method = "SSDAM" if cfg.estimator == "approximate" else "SSDEM"
    result = sim.run_study(cfg, threads=rc.threads,
                           progress=lambda k, r: log.info("replicate %d %s", k, "ok" if r["ok"] else "failed"))
    rows = []
    for r in result.rows:
        if r["ok"]:
            for t in sim.TARGETS:
                rows.append((r["replicate"], method, t, r["score"].rmse[t], r["score"].coverage[t], ""))
        else:
            for t in sim.TARGETS:
                rows.append((r["replicate"], method, t, float("nan"), float("nan"), r["error"]))
    tables.write_csv(stage / "study_replicates.csv",
                     ["replicate", "method", "target", "rmse", "coverage", "error"], rows)
    mean = result.mean()
    n_ok = len(result.rows) - result.n_failed
    summary = [(method, t, mean.get(f"{t}_rmse", float("nan")), mean.get(f"{t}_coverage", float("nan")),
                n_ok, result.n_failed, result.failure_rate) for t in sim.TARGETS]
    tables.write_csv(stage / "study_summary.csv",
                     ["method", "target", "rmse", "coverage", "n_ok", "n_failed", "failure_rate"], summary)
    tables.write_columns(stage / "study_curve.csv", {
        "distance": sim.CURVE_DISTANCES, "true": sim.matern1(sim.CURVE_DISTANCES, cfg.range),
        "mean_fitted": result.mean_curve()})
    hyp = [(r["replicate"], 1.0 / r["rho"], *np.log(r["lam"])) for r in result.rows if r["ok"]]
    tables.write_csv(stage / "study_hyperparameters.csv",
                     ["replicate", "range", "v_spatial", "v_error"], hyp)


def cmd_score(rc: RunConfig, stage: Path):
    truth_dir, pred_dir = rc.path("score.truth_dir"), rc.path("score.pred_dir")
    _, tc, _ = tables.read_table(truth_dir / "truth_cells.csv", {
        "cell_id": "int", "spatial": "float", "x1": "float", "intensity": "float", "count": "int"})
    _, ta, _ = tables.read_table(truth_dir / "truth_areas.csv", {"area_id": "int", "mean": "float"})
    grid_cols = {"cell_id": "int", "median": "float", "lower": "float", "upper": "float",
                 "exceedance": "float", "spatial_median": "float", "spatial_lower": "float",
                 "spatial_upper": "float"}
    gpath = pred_dir / "grid_summary.csv"
    _, gc, _ = tables.read_table(gpath, {k: v for k, v in grid_cols.items() if k != "exceedance"},
                                 optional={"exceedance": "float"})
    apath = pred_dir / "area_summary.csv"
    _, ac, _ = tables.read_table(apath, {"area_id": "int", "median": "float", "lower": "float",
                                         "upper": "float", "pred_lower": "float", "pred_median": "float",
                                         "pred_upper": "float"})
    if gc["cell_id"] != tc["cell_id"]:
        raise InputError("cell ids do not match the truth table", gpath)
    if ac["area_id"] != ta["area_id"]:
        raise InputError("area ids do not match the truth table", apath)
    arr = {k: np.array(v) for k, v in gc.items()}
    grid = predict.GridSummary(arr["median"], arr["lower"], arr["upper"], None, arr["spatial_median"],
                               arr["spatial_lower"], arr["spatial_upper"])
    a = {k: np.array(v) for k, v in ac.items()}
    areas = predict.AreaSummary(a["area_id"], a["median"], a["lower"], a["upper"], a["pred_lower"],
                                a["pred_upper"], a["pred_median"])
    truth = sim.TruthSurface(np.array(tc["spatial"]), np.array(tc["x1"]), None, np.array(tc["intensity"]),
                             np.array(tc["count"]), np.array(ta["mean"]), None)
    rep = sim.score(grid, areas, truth)
    tables.write_csv(stage / "score.csv", ["target", "rmse", "coverage"],
                     [(t, rep.rmse[t], rep.coverage[t]) for t in sim.TARGETS])


COMMANDS = {"fit": cmd_fit, "predict": cmd_predict, "simulate": cmd_simulate, "score": cmd_score}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--out", default=".", help="output directory (default: current)")
    common.add_argument("--seed", type=int, help="seed for fitting, sampling and simulation")
    common.add_argument("--threads", type=int, help="worker threads (default: $GEODISAGG_THREADS or all cores)")
    common.add_argument("--estimator", choices=geometry.ESTIMATORS)
    common.add_argument("-v", "--verbose", action="count", default=0)
    parser = argparse.ArgumentParser(prog="geodisagg", description="Spatial disaggregation of area counts.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("fit", parents=[common], help="fit the model and write hyperparameters")
    sub.add_parser("predict", parents=[common], help="grid and area summaries from a saved fit")
    s = sub.add_parser("simulate", parents=[common], help="simulation study or one simulated dataset")
    s.add_argument("--scenario", choices=tuple(sim.SCENARIO_RANGE))
    s.add_argument("--area-size", type=int, choices=(4, 5, 10, 20, 25, 50))
    s.add_argument("--replicates", type=int)
    s.add_argument("--data-only", action="store_true", help="write one dataset and its truth instead")
    sub.add_parser("score", parents=[common], help="score predictions against a simulated truth")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = build_config(args)
    except UsageError as exc:
        parser.error(str(exc))  # exits with status 2
    created = not rc.out.exists()
    try:
        rc.out.mkdir(parents=True, exist_ok=True)
        stage = Path(tempfile.mkdtemp(prefix=".geodisagg-", dir=rc.out))
    except OSError as exc:
        print(f"geodisagg: error: cannot write to {rc.out}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    try:
        COMMANDS[rc.command](rc, stage)
        for f in sorted(stage.iterdir()):
            os.replace(f, rc.out / f.name)
    except (GeodisaggError, ValueError, OSError) as exc:
        print(f"geodisagg: error: {exc}", file=sys.stderr)
        shutil.rmtree(stage, ignore_errors=True)
        if created:
            shutil.rmtree(rc.out, ignore_errors=True)
        return EXIT_ERROR
    shutil.rmtree(stage, ignore_errors=True)
    return EXIT_OK


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
