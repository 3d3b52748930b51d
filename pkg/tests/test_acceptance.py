"""Acceptance suite: one test per criterion, each reporting PASS or FAIL.

Criteria 4 to 7 run simulation studies and are marked ``slow``.  Every
criterion asserts at its stated tolerance; the summary lines are printed at
the end of the pytest run.
"""

import hashlib
import math
import os
import time

import numpy as np
import pytest
from scipy import stats
from scipy.special import gammaln

from geodisagg import cli, predict, sim
from geodisagg import inference as inf
from geodisagg.basis import FAMILIES, KnotSet, SplineBasisSpec
from geodisagg.model import ModelSpec, assemble

from conftest import grid_problem, record_acceptance, single_cell_problem
from test_inference import (fd_gradient, gauss_hermite_log_integral, oracle_log_joint, oracle_mode,
                            random_point, tiny_instance)


# -- 1. gradient correctness ---------------------------------------------------

def test_criterion_1_gradients():
    t0 = time.perf_counter()
    worst = 0.0
    p = grid_problem(6, 6, 2, seed=11)
    cases = [(e, f, q) for e in ("exact", "approximate") for f in FAMILIES for q in (0, 1)]
    for case, (est, family, q) in enumerate(cases):
        smooth = {"z1": SplineBasisSpec(K=6)} if q else {}
        mod = assemble(p, ModelSpec(linear_covariates=["x1"], smooth_covariates=smooth, n_knots=5,
                                    family=family, estimator=est))
        rng = np.random.default_rng(case)
        lam = np.exp(rng.normal(0, 1, q + 2))
        rho = float(np.exp(rng.normal(-1, 0.5)))
        f = lambda x: inf.log_conditional_posterior(mod, x, lam, rho)
        for _ in range(20):
            xi = random_point(mod, rng)
            g, _ = inf.gradient_and_hessian(mod, xi, lam, rho)
            worst = max(worst, np.linalg.norm(g - fd_gradient(f, xi)) / np.linalg.norm(g))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-5 and secs < 60
    assert record_acceptance(1, ok, f"max relative gradient error {worst:.2e} (tol 1e-5), "
                                    f"2 estimators x 4 families x q in {{0,1}} x 20 points, {secs:.1f} s")


# -- 2. Laplace oracle -----------------------------------------------------------

def test_criterion_2_laplace_oracle():
    t0 = time.perf_counter()
    p, mod = tiny_instance()
    mode_err, hp_err = 0.0, 0.0
    prior = stats.betaprime(1.5, 1e-5, scale=2e-5 / 3)
    for v in (np.array([0.5, 1.0]), np.array([1.5, 0.0])):
        lam, rho = np.exp(v), 0.2
        f = oracle_log_joint(p, mod, lam, rho)
        x_star = oracle_mode(p, lam, rho)
        fit = inf.laplace_mode(mod, lam, rho)
        mode_err = max(mode_err, np.max(np.abs(fit.mode - x_star)))
        log_int = gauss_hermite_log_integral(f, x_star)
        oracle = log_int + gammaln(p.counts + 1).sum() + prior.logpdf(lam).sum() + v.sum() \
            + prior.logpdf(rho) + math.log(rho)
        hp = inf.log_hyperposterior(mod, v, math.log(rho))
        hp_err = max(hp_err, abs(hp - oracle) / abs(oracle))
    secs = time.perf_counter() - t0
    ok = mode_err <= 1e-6 and hp_err <= 5e-2 and secs < 60
    assert record_acceptance(2, ok, f"mode error {mode_err:.1e} (tol 1e-6), hyperposterior relative error "
                                    f"{hp_err:.2e} (tol 5e-2), {secs:.1f} s")


# -- 3. estimator coincidence ----------------------------------------------------

def test_criterion_3_estimator_coincidence():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(5):
        p = single_cell_problem(8, seed=seed)
        knots = KnotSet(p.coords[:3])
        fits = {}
        for est in ("exact", "approximate"):
            spec = ModelSpec(linear_covariates=["x1"], smooth_covariates={"z1": SplineBasisSpec(K=5)},
                             n_knots=3, estimator=est)
            fits[est] = assemble(p, spec, knots=knots)
        ex, ap = fits["exact"], fits["approximate"]
        rng = np.random.default_rng(seed)
        lam, rho = np.exp(rng.normal(0, 1, 3)), 0.3
        xi = random_point(ex, rng)
        diffs = [abs(inf.log_conditional_posterior(ex, xi, lam, rho)
                     - inf.log_conditional_posterior(ap, xi, lam, rho))]
        diffs.append(np.max(np.abs(inf.gradient_and_hessian(ex, xi, lam, rho)[0]
                                   - inf.gradient_and_hessian(ap, xi, lam, rho)[0])))
        fe, fa = inf.laplace_mode(ex, lam, rho), inf.laplace_mode(ap, lam, rho)
        diffs.append(np.max(np.abs(fe.mode - fa.mode)))
        hyper = inf.Hyperparameters(np.log(lam), math.log(rho))
        me, ma = inf.refit_at(ex, hyper), inf.refit_at(ap, hyper)
        noise = rng.standard_normal((50, ex.dim))
        de = predict.sample_posterior(me.laplace, 50, noise=noise)
        da = predict.sample_posterior(ma.laplace, 50, noise=noise)
        ge = predict.predict_grid(me, de, error_term="none")
        ga = predict.predict_grid(ma, da, error_term="none")
        diffs.append(np.max(np.abs(np.log(ge.median / ga.median))))
        diffs.append(np.max(np.abs(ge.spatial_upper - ga.spatial_upper)))
        _, mu_e = predict.area_mean_draws(me, de)
        _, mu_a = predict.area_mean_draws(ma, da)
        diffs.append(np.max(np.abs(mu_e - mu_a) / mu_a))
        worst = max(worst, *diffs)
    secs = time.perf_counter() - t0
    ok = worst <= 1e-8 and secs < 60
    assert record_acceptance(3, ok, f"max discrepancy {worst:.1e} over objectives, gradients, modes and "
                                    f"predictions (tol 1e-8), {secs:.1f} s")


# -- 4 to 6. simulation envelopes --------------------------------------------------

def _study(config):
    t0 = time.perf_counter()
    result = sim.run_study(config, threads=os.cpu_count() or 1)
    return result, time.perf_counter() - t0


@pytest.fixture(scope="module")
def study_b():
    return _study(sim.scenario("b", 10, replicates=10))


@pytest.mark.slow
def test_criterion_4_scenario_a_envelope():
    result, secs = _study(sim.scenario("a", 20, replicates=20))
    m = result.mean()
    checks = {
        "spatial RMSE": (m.get("spatial_rmse", math.nan), 0.6, 1.0),
        "intensity coverage": (m.get("intensity_coverage", math.nan), 0.80, math.inf),
        "area mean RMSE": (m.get("area_mean_rmse", math.nan), 2.0, 4.5),
    }
    ok = result.n_failed == 0 and all(lo <= v <= hi for v, lo, hi in checks.values())
    detail = ", ".join(f"{k} {v:.5f} in [{lo}, {hi}]" for k, (v, lo, hi) in checks.items())
    assert record_acceptance(4, ok, f"{detail}; {len(result.rows)} replicates, "
                                    f"{result.n_failed} failed, {secs:.0f} s")


@pytest.mark.slow
def test_criterion_5_scenario_b_envelope(study_b):
    result, secs = study_b
    m = result.mean()
    sp, cov = m.get("spatial_rmse", math.nan), m.get("intensity_coverage", math.nan)
    ok = result.n_failed == 0 and 0.35 <= sp <= 0.75 and cov >= 0.90
    assert record_acceptance(5, ok, f"spatial RMSE {sp:.5f} in [0.35, 0.75], intensity coverage {cov:.5f} "
                                    f">= 0.90; {len(result.rows)} replicates, {result.n_failed} failed, "
                                    f"{secs:.0f} s")


@pytest.mark.slow
def test_criterion_6_correlation_recovery(study_b):
    result, _ = study_b
    true = sim.matern1(sim.CURVE_DISTANCES, 10.0)
    dev = np.abs(result.mean_curve() - true)
    k = int(np.nanargmax(dev))
    ok = bool(np.all(dev <= 0.2))
    assert record_acceptance(6, ok, f"max |mean fitted - true| {dev[k]:.3f} at distance "
                                    f"{sim.CURVE_DISTANCES[k]:g} (tol 0.2, distances 0-30)")


# -- 7. posterior-predictive coverage of sub-area counts ----------------------------

@pytest.mark.slow
def test_criterion_7_subarea_predictive_coverage():
    t0 = time.perf_counter()
    cfg = sim.scenario("a", 10, replicates=1)
    problem, truth = sim.simulate_dataset(cfg, 0)
    spec = sim.model_spec_for(cfg)
    fitted = inf.fit(problem, spec, seed=0, restarts=cfg.restarts)
    draws = predict.sample_posterior(fitted.laplace, cfg.draws, seed=1)
    sub = sim.square_tiling(cfg.domain, 4)
    s = predict.aggregate_areas(fitted, draws, sub, problem.cell_ids, np.ones(problem.n_cells), seed=2,
                                error_term="grid")
    observed = np.bincount(sub, weights=truth.cell_counts)[s.area_ids]
    cover = float(np.mean((s.pred_lower <= observed) & (observed <= s.pred_upper)))
    secs = time.perf_counter() - t0
    ok = 0.90 <= cover <= 0.99 and secs < 300
    assert record_acceptance(7, ok, f"coverage {cover:.4f} in [0.90, 0.99] over {len(observed)} "
                                    f"4 x 4 sub-areas, {secs:.0f} s")


# -- 8. determinism -----------------------------------------------------------------

def _digest(directory):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(directory.iterdir())}


def test_criterion_8_determinism(tmp_path):
    runs = []
    for k in range(2):
        root = tmp_path / f"run{k}"
        small = ["--set", "sim.domain=20", "--seed", "4", "--threads", str(k + 1)]
        steps = [
            ["simulate", "--data-only", "--area-size", "5", *small, "--out", root / "data"],
            ["simulate", "--area-size", "10", "--replicates", "2", "--set", "sim.restarts=2",
             "--set", "sim.draws=200", "--set", "model.knots=6", *small, "--out", root / "study"],
            ["fit", "--set", f"data.cells={root}/data/cells.csv",
             "--set", f"data.membership={root}/data/membership.csv",
             "--set", f"data.areas={root}/data/areas.csv", "--set", "model.linear=x1",
             "--set", "model.knots=8", "--set", "fit.restarts=3", *small, "--out", root / "fit"],
        ]
        steps.append(["predict", *steps[2][1:-2], "--set", "predict.draws=300", "--set", "predict.threshold=0.1",
                      "--out", root / "fit"])
        steps.append(["score", "--set", f"score.truth_dir={root}/data", "--set", f"score.pred_dir={root}/fit",
                      "--out", root / "fit"])
        for argv in steps:
            assert cli.run([str(a) for a in argv]) == 0, argv
        runs.append({d: _digest(root / d) for d in ("data", "study", "fit")})
    same = runs[0] == runs[1]
    n_files = sum(len(v) for v in runs[0].values())
    assert record_acceptance(8, same, f"{n_files} output files from simulate, fit, predict and score "
                                      f"{'byte-identical' if same else 'differ'} across reruns "
                                      f"(1 vs 2 threads)")
