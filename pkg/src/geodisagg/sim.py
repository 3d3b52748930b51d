"""Synthetic truth on a square unit grid and scoring of fitted surfaces.

Fields are Matern (nu = 1) Gaussian random fields drawn by dense Cholesky;
the factor is cached per grid and range so replicates only pay for the
matrix-vector product.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
import scipy.linalg as sla
from scipy.special import kv

from . import geometry, inference, predict
from .basis import SplineBasisSpec  # noqa: F401  (re-exported for configs)
from .errors import GeodisaggError
from .model import ModelSpec

log = logging.getLogger(__name__)

KNOTS_BY_AREA_SIZE = {4: 350, 10: 200, 20: 50}
SCENARIO_RANGE = {"a": 3.0, "b": 10.0}
GRF_NUGGET = 1e-10


@dataclass(frozen=True)
class ScenarioConfig:
    domain: int = 100
    nu: float = 1.0
    sigma2: float = 0.7
    range: float = 3.0
    beta0: float = -3.0
    beta1: float = -1.5
    covariate_range: tuple[float, float] = (0.0, 1.5)
    area_size: int = 20
    replicates: int = 20
    seed: int = 0
    n_knots: int | None = None
    estimator: str = "approximate"
    family: str = "matern32"
    restarts: int = 25
    draws: int = 2000
    error_term: str = "grid"

    def __post_init__(self):
        if self.domain % self.area_size:
            raise ValueError(f"area size {self.area_size} does not divide domain {self.domain}")
        if not self.range > 0 or not self.sigma2 >= 0:
            raise ValueError("range must be positive and sigma2 nonnegative")
        if self.nu != 1.0:
            raise ValueError("only the nu = 1 Matern field is implemented")

    @property
    def knots(self) -> int:
        if self.n_knots is not None:
            return self.n_knots
        return KNOTS_BY_AREA_SIZE.get(self.area_size, min(350, 2 * self.n_areas))

    @property
    def n_areas(self) -> int:
        return (self.domain // self.area_size) ** 2


def scenario(name: str, area_size: int = 20, **kw) -> ScenarioConfig:
    """Scenario 'a' (range 3) or 'b' (range 10) at a given area size."""
    if name not in SCENARIO_RANGE:
        raise ValueError(f"unknown scenario {name!r}; expected 'a' or 'b'")
    return ScenarioConfig(range=SCENARIO_RANGE[name], area_size=area_size, **kw)


def grid_coords(domain: int) -> np.ndarray:
    """Unit-cell centres, row-major in y then x."""
    c = np.arange(domain) + 0.5
    xx, yy = np.meshgrid(c, c)
    return np.column_stack([xx.ravel(), yy.ravel()])


def matern1(d, range_: float):
    """Matern nu = 1 correlation (d/phi) K1(d/phi), equal to 1 at d = 0."""
    x = np.asarray(d, dtype=float) / range_
    out = np.ones_like(x)
    pos = x > 0
    out[pos] = x[pos] * kv(1, x[pos])
    return out


@lru_cache(maxsize=1)
def _grf_factor(domain: int, range_: float) -> np.ndarray:
    coords = grid_coords(domain)
    n = len(coords)
    R = np.empty((n, n))
    block = 1000
    for s in range(0, n, block):
        d = np.hypot(coords[s:s + block, None, 0] - coords[None, :, 0],
                     coords[s:s + block, None, 1] - coords[None, :, 1])
        R[s:s + block] = matern1(d, range_)
    R[np.diag_indices(n)] += GRF_NUGGET
    return sla.cholesky(R, lower=True, overwrite_a=True, check_finite=False)


def simulate_grf(config: ScenarioConfig, seed) -> np.ndarray:
    """One zero-mean field over the grid cells with variance sigma2."""
    n = config.domain ** 2
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(n)
    if config.sigma2 == 0:
        return np.zeros(n)
    L = _grf_factor(config.domain, float(config.range))
    return np.sqrt(config.sigma2) * (L @ z)


def simulate_covariate(config: ScenarioConfig, rng) -> np.ndarray:
    """Low-frequency sinusoidal surface rescaled into the covariate range."""
    w = grid_coords(config.domain) / config.domain
    f = rng.integers(1, 3, size=3)
    ph = rng.uniform(0, 2 * np.pi, size=3)
    z = (np.sin(2 * np.pi * f[0] * w[:, 0] + ph[0])
         + np.sin(2 * np.pi * f[1] * w[:, 1] + ph[1])
         + 0.5 * np.sin(np.pi * f[2] * (w[:, 0] + w[:, 1]) + ph[2]))
    lo, hi = config.covariate_range
    pad = 0.01 * (hi - lo)
    z = (z - z.min()) / (z.max() - z.min())
    return lo + pad + (hi - lo - 2 * pad) * z


def square_tiling(domain: int, size: int) -> np.ndarray:
    """Area index of each grid cell for a tiling with ``size`` x ``size`` squares."""
    c = grid_coords(domain)
    per_row = domain // size
    return (c[:, 1] // size).astype(int) * per_row + (c[:, 0] // size).astype(int)


@dataclass(frozen=True, eq=False)
class TruthSurface:
    spatial: np.ndarray
    x1: np.ndarray
    log_intensity: np.ndarray
    intensity: np.ndarray
    cell_counts: np.ndarray
    area_mean: np.ndarray
    area_of_cell: np.ndarray


def simulate_dataset(config: ScenarioConfig, seed):
    """Simulate one dataset; returns ``(problem, truth)``.

    Counts are drawn per cell and summed over each area, which is the same
    as drawing Poisson(mu_i) per area but also yields sub-area truths.
    """
    ss = np.random.SeedSequence(seed)
    s_grf, s_cov, s_cnt = ss.spawn(3)
    coords = grid_coords(config.domain)
    n_cells = len(coords)
    s = simulate_grf(config, s_grf)
    x1 = simulate_covariate(config, np.random.default_rng(s_cov))
    log_r = config.beta0 + config.beta1 * x1 + s
    r = np.exp(log_r)
    cell_counts = np.random.default_rng(s_cnt).poisson(r)
    area = square_tiling(config.domain, config.area_size)
    n_areas = config.n_areas
    mu = np.bincount(area, weights=r, minlength=n_areas)
    y = np.bincount(area, weights=cell_counts, minlength=n_areas).astype(np.int64)
    cell_ids = np.arange(n_cells)
    problem = geometry.DisaggregationProblem.from_arrays(
        cell_ids=cell_ids,
        coords=coords,
        population=np.ones(n_cells),
        covariates={"x1": x1},
        area_ids=np.arange(n_areas),
        counts=y,
        membership_area=area,
        membership_cell=cell_ids,
        membership_coverage=np.ones(n_cells),
    )
    truth = TruthSurface(s, x1, log_r, r, cell_counts, mu, area)
    return problem, truth


# -- scoring -----------------------------------------------------------------

TARGETS = ("spatial", "intensity", "area_mean")


@dataclass(frozen=True)
class ScoreReport:
    rmse: dict
    coverage: dict
    fit_seconds: float = float("nan")

    def as_row(self) -> dict:
        row = {}
        for t in self.rmse:
            row[f"{t}_rmse"] = self.rmse[t]
            row[f"{t}_coverage"] = self.coverage[t]
        return row


def score_target(median, lower, upper, truth):
    """RMSE of the point estimate and coverage of the interval for one target."""
    median, lower, upper, truth = (np.asarray(a, dtype=float) for a in (median, lower, upper, truth))
    if not (median.shape == lower.shape == upper.shape == truth.shape):
        raise ValueError("predictions and truth are not aligned")
    rmse = float(np.sqrt(np.mean((median - truth) ** 2)))
    cov = float(np.mean((truth >= lower) & (truth <= upper)))
    return rmse, cov


def score(grid: predict.GridSummary, areas: predict.AreaSummary, truth: TruthSurface,
          fit_seconds: float = float("nan")) -> ScoreReport:
    pairs = {
        "spatial": (grid.spatial_median, grid.spatial_lower, grid.spatial_upper, truth.spatial),
        "intensity": (grid.median, grid.lower, grid.upper, truth.intensity),
        "area_mean": (areas.median, areas.lower, areas.upper, truth.area_mean),
    }
    rmse, cov = {}, {}
    for name, (m, lo, hi, t) in pairs.items():
        rmse[name], cov[name] = score_target(m, lo, hi, t)
    return ScoreReport(rmse, cov, fit_seconds)


# -- study -------------------------------------------------------------------

CURVE_DISTANCES = np.arange(0.0, 30.5, 1.0)


def model_spec_for(config: ScenarioConfig) -> ModelSpec:
    return ModelSpec(linear_covariates=("x1",), family=config.family,
                     n_knots=config.knots, estimator=config.estimator)


def run_replicate(config: ScenarioConfig, seed, threads: int = 1) -> dict:
    """Simulate, fit, predict and score one replicate.

    Failures are caught and reported in the row instead of raised.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    data_seed, fit_seed, draw_seed = ss.generate_state(3)
    problem, truth = simulate_dataset(config, data_seed)
    spec = model_spec_for(config)
    t0 = time.perf_counter()
    try:
        fitted = inference.fit(problem, spec, seed=int(fit_seed), restarts=config.restarts,
                               threads=threads)
    except GeodisaggError as exc:
        return {"ok": False, "error": str(exc), "fit_seconds": time.perf_counter() - t0}
    secs = time.perf_counter() - t0
    draws = predict.sample_posterior(fitted.laplace, config.draws, int(draw_seed))
    grid = predict.predict_grid(fitted, draws, error_term=config.error_term, seed=int(draw_seed))
    areas = predict.aggregate_areas(fitted, draws, seed=int(draw_seed))
    rep = score(grid, areas, truth, secs)
    return {
        "ok": True,
        "error": "",
        "score": rep,
        "fit_seconds": secs,
        "rho": fitted.rho,
        "lam": fitted.hyper.lam,
        "objective": fitted.objective,
        "curve": predict.correlation_curve(fitted, CURVE_DISTANCES),
    }


@dataclass
class StudyResult:
    config: ScenarioConfig
    rows: list = field(default_factory=list)
    curves: list = field(default_factory=list)

    @property
    def n_failed(self) -> int:
        return sum(not r["ok"] for r in self.rows)

    @property
    def failure_rate(self) -> float:
        return self.n_failed / max(1, len(self.rows))

    def mean(self) -> dict:
        good = [r["score"].as_row() for r in self.rows if r["ok"]]
        if not good:
            return {}
        return {k: float(np.mean([g[k] for g in good])) for k in good[0]}

    def mean_curve(self) -> np.ndarray:
        return np.mean(self.curves, axis=0) if self.curves else np.full(len(CURVE_DISTANCES), np.nan)


def run_study(config: ScenarioConfig, threads: int = 1, progress=None) -> StudyResult:
    """Replicate the simulation protocol ``config.replicates`` times.

    Replicate seeds are spawned from ``config.seed``; replicates run on
    ``threads`` workers and are collected in replicate order.
    """
    seeds = np.random.SeedSequence(config.seed).spawn(config.replicates)

    def job(k):
        res = run_replicate(config, seeds[k])
        res["replicate"] = k
        if progress is not None:
            progress(k, res)
        return res

    # warm the cached field factor once before fanning out
    _grf_factor(config.domain, float(config.range))
    if threads > 1 and config.replicates > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(job, range(config.replicates)))
    else:
        rows = [job(k) for k in range(config.replicates)]
    out = StudyResult(config)
    for r in rows:
        out.rows.append(r)
        if r["ok"]:
            out.curves.append(r["curve"])
    return out
