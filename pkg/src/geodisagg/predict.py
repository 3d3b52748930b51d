"""Posterior draws and their summaries at cell and area level."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from . import basis, geometry
from .errors import StructuralError

log = logging.getLogger(__name__)

DEFAULT_DRAWS = 2000
LEVELS = (2.5, 50.0, 97.5)
CHUNK = 256
POISSON_MAX = 1e18  # numpy's Poisson sampler rejects larger means


@dataclass(frozen=True, eq=False)
class PosteriorDraws:
    samples: np.ndarray  # M x dim
    seed: object

    @property
    def M(self) -> int:
        return len(self.samples)


def sample_posterior(fit, M: int = DEFAULT_DRAWS, seed=0, noise=None) -> PosteriorDraws:
    """Draw from N(mode, inverse negative Hessian).

    With ``chol`` = L and -H = L L', a draw is ``mode + L'^{-1} z``.  ``noise``
    replaces the standard-normal matrix (M x dim) when given.
    """
    if M < 1:
        raise ValueError("need at least one draw")
    dim = len(fit.mode)
    if noise is None:
        noise = np.random.default_rng(seed).standard_normal((M, dim))
    noise = np.asarray(noise, dtype=float).reshape(M, dim)
    dev = sla.solve_triangular(fit.chol, noise.T, lower=True, trans="T")
    return PosteriorDraws(fit.mode[None, :] + dev.T, seed)


def _percentiles(a, axis=0):
    return np.percentile(a, LEVELS, axis=axis)


@dataclass(frozen=True, eq=False)
class GridSummary:
    median: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    exceedance: np.ndarray | None
    spatial_median: np.ndarray
    spatial_lower: np.ndarray
    spatial_upper: np.ndarray
    n_clamped: int = 0
    threshold: float | None = None


def _beta_parts(model):
    lay = model.layout
    nb = lay.n_beta
    return nb - 2, nb  # coordinate slopes live in the last two beta slots


ERROR_TERMS = ("none", "area", "grid")


def _area_weight_matrix(model) -> sp.csr_matrix:
    """n x n_cells matrix whose rows average cell values into area values.

    Uses the same per-cell weights that define the area error term of the
    fitted estimator, normalized to sum to one per area.
    """
    P = model.problem
    w = geometry.stacked_weights(P, model.estimator, model.spec.weighting)
    tot = np.bincount(P.member_area, weights=w, minlength=P.n)
    W = sp.csr_matrix((w / tot[P.member_area], (P.member_area, P.member_cell)),
                      shape=(P.n, P.n_cells))
    W.sum_duplicates()
    return W


def grid_error_draws(model, eps, sigma: float, rng) -> np.ndarray:
    """Cell-level errors drawn given their area averages (M x n_cells).

    Cell errors are iid N(0, sigma^2) a priori and each area error is their
    weighted average ``W e``.  A draw from ``e | W e = eps`` is
    ``sigma z + W' (W W')^{-1} (eps - sigma W z)`` with z standard normal.
    Cells outside every area get unconditional draws.
    """
    eps = np.atleast_2d(eps)
    W = _area_weight_matrix(model)
    Z = sigma * rng.standard_normal((len(eps), W.shape[1]))
    K = (W @ W.T).toarray()
    fac = sla.cho_factor(K)
    resid = eps - (W @ Z.T).T
    return Z + (W.T @ sla.cho_solve(fac, resid.T)).T


def predict_grid(fitted, draws: PosteriorDraws, coords=None, covariates=None,
                 threshold: float | None = None, error_term: str = "grid",
                 seed=0, center_spatial: bool = True) -> GridSummary:
    """Cell-level intensity and spatial-term summaries over the draws.

    The intensity is exp of the cell-level linear predictor.  The spatial
    term is the coordinate trend plus the kriging part plus, depending on
    ``error_term``, an error:

    ``"grid"``
        the cell-level error, drawn given each draw's area errors (see
        :func:`grid_error_draws`); at new coordinates it is drawn from its
        prior.
    ``"area"``
        the coverage-weighted average of the area errors of the areas
        covering the cell (training cells only).
    ``"none"``
        no error term.

    With ``center_spatial`` each draw's trend-plus-kriging part is shifted
    to mean zero over the training cells; the level of the spatial term is
    not identified apart from the intercept.  The intensity is unaffected.

    Percentiles are taken on the log scale and exponentiated.  Without
    ``coords`` the training cells are used.
    """
    if error_term not in ERROR_TERMS:
        raise ValueError(f"error_term must be one of {ERROR_TERMS}")
    model = fitted.model
    rho = fitted.rho
    lay = model.layout
    X = draws.samples
    if coords is None:
        C = model.cell_design(rho)
        n_clamped = model.n_clamped
    else:
        if error_term == "area":
            raise ValueError("area errors are only defined on the training cells")
        C, n_clamped = model.new_cell_design(coords, covariates or {}, rho, return_clamped=True)
    if n_clamped:
        log.warning("%d covariate values outside the spline domain were clamped", n_clamped)
    n_cells = len(C)
    err = None
    if error_term != "none":
        sigma = float(fitted.hyper.lam[-1]) ** -0.5
        rng = np.random.default_rng(seed)
        if error_term == "area":
            err = (model.eps_to_cells @ X[:, lay.eps].T).T
        elif coords is None:
            err = grid_error_draws(model, X[:, lay.eps], sigma, rng)
        else:
            err = sigma * rng.standard_normal((draws.M, n_cells))
    w0, w1 = _beta_parts(model)
    spatial_cols = np.r_[w0:w1, lay.u.start:lay.u.stop]
    cell = lay.cell_part
    shift = 0.0
    if center_spatial:
        train_mean = model.cell_design(rho)[:, spatial_cols].mean(axis=0)
        shift = (X[:, spatial_cols] @ train_mean)[:, None]
    out = {k: np.empty((3, n_cells)) for k in ("eta", "spat")}
    exceed = np.empty(n_cells) if threshold is not None else None
    for s in range(0, n_cells, CHUNK * 8):
        sl = slice(s, min(n_cells, s + CHUNK * 8))
        eta = X[:, cell] @ C[sl].T
        spat = X[:, spatial_cols] @ C[sl][:, spatial_cols].T - shift
        if err is not None:
            eta += err[:, sl]
            spat += err[:, sl]
        out["eta"][:, sl] = _percentiles(eta)
        out["spat"][:, sl] = _percentiles(spat)
        if threshold is not None:
            exceed[sl] = np.mean(eta > np.log(threshold), axis=0)
    lo, med, hi = np.exp(out["eta"])
    slo, smed, shi = out["spat"]
    return GridSummary(med, lo, hi, exceed, smed, slo, shi, n_clamped, threshold)


@dataclass(frozen=True, eq=False)
class AreaSummary:
    area_ids: np.ndarray
    median: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    pred_lower: np.ndarray
    pred_upper: np.ndarray
    pred_median: np.ndarray


def _target_weights(model, area_ids, cell_ids, coverage):
    """Sparse (targets x cells) weights and per-target population totals."""
    P = model.problem
    area_ids = np.asarray(area_ids)
    coverage = np.asarray(coverage, dtype=float)
    uniq, t_idx = np.unique(area_ids, return_inverse=True)
    # keep first-appearance order of target areas
    first = np.array([np.flatnonzero(t_idx == k)[0] for k in range(len(uniq))])
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    t_idx = rank[t_idx]
    uniq = uniq[order]
    cells = P.cell_positions(cell_ids)
    if np.any(coverage <= 0) or np.any(coverage > 1):
        raise StructuralError("target coverage must lie in (0, 1]")
    am = coverage * P.population[cells]
    n_t = len(uniq)
    A1 = sp.csr_matrix((am, (t_idx, cells)), shape=(n_t, P.n_cells))
    if model.estimator == "approximate":
        v = am if model.spec.weighting == "population" else coverage
        tot = np.bincount(t_idx, weights=v, minlength=n_t)
        if np.any(tot <= 0):
            raise StructuralError("target area with zero aggregation weight")
        A2 = sp.csr_matrix((v / tot[t_idx], (t_idx, cells)), shape=(n_t, P.n_cells))
        m = np.bincount(t_idx, weights=am, minlength=n_t)
        if np.any(m <= 0):
            raise StructuralError("target area with zero population")
        return uniq, A1, A2, m
    return uniq, A1, None, None


def area_mean_draws(fitted, draws: PosteriorDraws, area_ids=None, cell_ids=None, coverage=None,
                    error_term: str = "area", seed=0):
    """Expected count of each target area for every draw (M x n_targets).

    Targets default to the training areas.  With ``error_term="area"`` the
    area errors enter at the cells through the coverage-weighted average of
    the training areas covering each cell; with ``"grid"`` they enter through
    cell-level errors drawn given the area errors (:func:`grid_error_draws`),
    which matters for targets that split training areas.
    """
    if error_term not in ("area", "grid"):
        raise ValueError("error_term must be 'area' or 'grid'")
    model = fitted.model
    P = model.problem
    if area_ids is None:
        area_ids = P.area_ids[P.member_area]
        cell_ids = P.cell_ids[P.member_cell]
        coverage = P.coverage
    if len(area_ids) == 0:
        raise StructuralError("no target memberships")
    uniq, A1, A2, m = _target_weights(model, area_ids, cell_ids, coverage)
    lay = model.layout
    C = model.cell_design(fitted.rho)
    X = draws.samples
    rng = np.random.default_rng(seed)
    sigma = float(fitted.hyper.lam[-1]) ** -0.5
    out = np.empty((draws.M, len(uniq)))
    for s in range(0, draws.M, CHUNK):
        sl = slice(s, min(draws.M, s + CHUNK))
        if error_term == "area":
            err = (model.eps_to_cells @ X[sl, lay.eps].T).T
        else:
            err = grid_error_draws(model, X[sl, lay.eps], sigma, rng)
        eta = X[sl, lay.cell_part] @ C.T + err
        if model.estimator == "exact":
            out[sl] = (A1 @ np.exp(np.clip(eta, -50, 50)).T).T
        else:
            out[sl] = m * np.exp(np.clip((A2 @ eta.T).T, -50, 50))
    return uniq, out


def aggregate_areas(fitted, draws: PosteriorDraws, area_ids=None, cell_ids=None, coverage=None,
                    seed=0, error_term: str = "area") -> AreaSummary:
    """Credible and posterior-predictive intervals for area counts.

    One Poisson count is drawn per posterior draw for the predictive interval.
    ``error_term`` is passed to :func:`area_mean_draws`.
    """
    uniq, mu = area_mean_draws(fitted, draws, area_ids, cell_ids, coverage, error_term, seed)
    lo, med, hi = _percentiles(mu)
    n_big = int(np.sum(mu > POISSON_MAX))
    if n_big:
        log.warning("%d area-mean draws above %g were capped for the predictive draw", n_big, POISSON_MAX)
    counts = np.random.default_rng([seed, 1]).poisson(np.minimum(mu, POISSON_MAX))
    plo, pmed, phi = _percentiles(counts)
    return AreaSummary(uniq, med, lo, hi, plo, phi, pmed)


def correlation_curve(fitted, distances) -> np.ndarray:
    """Fitted correlation function evaluated on ``distances``."""
    return basis.correlation(fitted.spec.family, fitted.rho, np.asarray(distances, dtype=float))
