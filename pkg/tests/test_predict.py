import math

import numpy as np
import pytest

from geodisagg import inference as inf
from geodisagg import predict
from geodisagg.errors import StructuralError
from geodisagg.model import ModelSpec, assemble, mean

from conftest import grid_problem


@pytest.fixture(scope="module")
def fitted_pair():
    p = grid_problem(8, 8, 2, seed=6)
    out = {}
    for est in ("exact", "approximate"):
        spec = ModelSpec(linear_covariates=["x1"], n_knots=8, estimator=est)
        out[est] = inf.fit(p, spec, seed=0, restarts=2)
    return out


def with_draws(fitted, samples):
    return predict.PosteriorDraws(np.asarray(samples, dtype=float), seed=None)


# -- sampling ----------------------------------------------------------------

def test_zero_noise_draw_is_mode(fitted_pair):
    fit = fitted_pair["approximate"].laplace
    d = predict.sample_posterior(fit, M=1, noise=np.zeros((1, len(fit.mode))))
    np.testing.assert_array_equal(d.samples[0], fit.mode)


def test_sampling_determinism(fitted_pair):
    fit = fitted_pair["approximate"].laplace
    a = predict.sample_posterior(fit, 10, seed=1)
    b = predict.sample_posterior(fit, 10, seed=1)
    c = predict.sample_posterior(fit, 10, seed=2)
    np.testing.assert_array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, c.samples)
    with pytest.raises(ValueError):
        predict.sample_posterior(fit, 0)


def test_sample_moments_match_laplace(fitted_pair):
    fit = fitted_pair["approximate"].laplace
    M = 50_000
    X = predict.sample_posterior(fit, M, seed=3).samples
    cov = fit.cov
    sd = np.sqrt(np.diag(cov))
    assert np.all(np.abs(X.mean(0) - fit.mode) <= 5 * sd / math.sqrt(M))
    S = np.cov(X, rowvar=False)
    # sampling sd of a covariance entry: sqrt((s_ij^2 + s_ii s_jj) / M)
    se = np.sqrt((cov**2 + np.outer(np.diag(cov), np.diag(cov))) / M)
    assert np.all(np.abs(S - cov) <= 5 * se)


# -- grid summaries ----------------------------------------------------------

def test_identical_draws_give_point_intervals(fitted_pair):
    f = fitted_pair["approximate"]
    d = with_draws(f, np.tile(f.laplace.mode, (5, 1)))
    g = predict.predict_grid(f, d, error_term="none")
    np.testing.assert_allclose(g.lower, g.median, rtol=1e-12)
    np.testing.assert_allclose(g.upper, g.median, rtol=1e-12)


def test_intercept_percentiles_by_hand(fitted_pair):
    f = fitted_pair["approximate"]
    X = np.zeros((4, f.model.dim))
    X[2:, 0] = math.log(4)  # beta0 draws: 0, 0, log 4, log 4
    g = predict.predict_grid(f, with_draws(f, X), error_term="none")
    # linear interpolation: 2.5% -> 0, 50% -> log(4)/2, 97.5% -> log 4
    np.testing.assert_allclose(g.lower, 1.0)
    np.testing.assert_allclose(g.median, 2.0)
    np.testing.assert_allclose(g.upper, 4.0)
    np.testing.assert_allclose(g.spatial_median, 0.0)


def test_exceedance_and_containment(fitted_pair):
    f = fitted_pair["exact"]
    d = predict.sample_posterior(f.laplace, 400, seed=5)
    g = predict.predict_grid(f, d, threshold=1e-12)
    np.testing.assert_array_equal(g.exceedance, 1.0)
    g = predict.predict_grid(f, d, threshold=1.0)
    assert np.all((g.exceedance >= 0) & (g.exceedance <= 1))
    assert np.all(g.lower <= g.median) and np.all(g.median <= g.upper)
    assert np.all(g.spatial_lower <= g.spatial_median) and np.all(g.spatial_median <= g.spatial_upper)


def test_error_terms(fitted_pair):
    f = fitted_pair["approximate"]
    d = predict.sample_posterior(f.laplace, 300, seed=5)
    widths = {et: np.mean(np.log(g.upper / g.lower)) for et in predict.ERROR_TERMS
              for g in [predict.predict_grid(f, d, error_term=et, seed=1)]}
    assert widths["grid"] >= widths["none"]
    with pytest.raises(ValueError):
        predict.predict_grid(f, d, error_term="cell")
    with pytest.raises(ValueError):
        predict.predict_grid(f, d, coords=[[1.0, 1.0]], covariates={"x1": [0.0]}, error_term="area")


def test_grid_errors_reproduce_area_errors(fitted_pair):
    for est, f in fitted_pair.items():
        model = f.model
        rng = np.random.default_rng(0)
        eps = rng.normal(size=(7, model.problem.n))
        e = predict.grid_error_draws(model, eps, 0.8, rng)
        W = predict._area_weight_matrix(model)
        np.testing.assert_allclose((W @ e.T).T, eps, atol=1e-10)


def test_grid_error_variance_given_area_mean():
    # one area of L equal-weight cells: Var(e_l | mean) = sigma^2 (1 - 1/L)
    p = grid_problem(4, 4, 4, seed=0, population=np.ones(16))
    f = inf.refit_at(assemble(p, ModelSpec(n_knots=2)), inf.Hyperparameters(np.array([0.0, 0.0]), -1.0))
    rng = np.random.default_rng(1)
    e = predict.grid_error_draws(f.model, np.zeros((20_000, 1)), 2.0, rng)
    np.testing.assert_allclose(e.var(axis=0), 4.0 * (1 - 1 / 16), rtol=0.05)


def test_new_coordinates(fitted_pair):
    f = fitted_pair["approximate"]
    d = predict.sample_posterior(f.laplace, 50, seed=1)
    P = f.model.problem
    a = predict.predict_grid(f, d, error_term="none")
    b = predict.predict_grid(f, d, coords=P.coords, covariates=P.covariates, error_term="none")
    np.testing.assert_allclose(a.median, b.median, rtol=1e-12)
    c = predict.predict_grid(f, d, coords=[[0.0, 0.0]], covariates={"x1": [50.0]}, error_term="none")
    assert c.n_clamped == 0  # linear covariates are never clamped


def test_more_draws_stable_medians(fitted_pair):
    f = fitted_pair["approximate"]
    g1 = predict.predict_grid(f, predict.sample_posterior(f.laplace, 1000, seed=1), error_term="none")
    d2 = predict.sample_posterior(f.laplace, 10_000, seed=2)
    g2 = predict.predict_grid(f, d2, error_term="none")
    # standard error of a sample median: sqrt(pi/2) * sd / sqrt(M), on the log scale
    eta = np.log(g2.upper / g2.lower) / (2 * 1.96)
    bound = 4 * math.sqrt(math.pi / 2) * eta / math.sqrt(1000)
    assert np.all(np.abs(np.log(g1.median / g2.median)) <= bound)


# -- area summaries ----------------------------------------------------------

def test_area_means_at_mode_match_model(fitted_pair):
    for f in fitted_pair.values():
        d = with_draws(f, f.laplace.mode[None, :])
        ids, mu = predict.area_mean_draws(f, d)
        np.testing.assert_array_equal(ids, f.model.problem.area_ids)
        np.testing.assert_allclose(mu[0], mean(f.model, f.laplace.mode, f.rho), rtol=1e-12)


def test_exact_split_area_additivity(fitted_pair):
    f = fitted_pair["exact"]
    P = f.model.problem
    d = predict.sample_posterior(f.laplace, 30, seed=4)
    area = P.area_ids[P.member_area]
    cells = P.cell_ids[P.member_cell]
    # split every area into its first cell and the rest
    first = np.r_[True, area[1:] != area[:-1]]
    sub = np.where(first, area * 2, area * 2 + 1)
    _, whole = predict.area_mean_draws(f, d, area, cells, P.coverage)
    ids, parts = predict.area_mean_draws(f, d, sub, cells, P.coverage)
    summed = np.zeros_like(whole)
    for k, sid in enumerate(ids):
        summed[:, list(P.area_ids).index(sid // 2)] += parts[:, k]
    np.testing.assert_allclose(summed, whole, rtol=1e-12)


def test_area_summary_containment(fitted_pair):
    for f in fitted_pair.values():
        d = predict.sample_posterior(f.laplace, 500, seed=2)
        s = predict.aggregate_areas(f, d, seed=3)
        assert np.all(s.lower <= s.median) and np.all(s.median <= s.upper)
        assert np.all(s.pred_lower <= s.pred_median) and np.all(s.pred_median <= s.pred_upper)
        t = predict.aggregate_areas(f, d, seed=3)
        np.testing.assert_array_equal(s.pred_upper, t.pred_upper)


def test_empty_target_rejected(fitted_pair):
    f = fitted_pair["exact"]
    d = predict.sample_posterior(f.laplace, 5, seed=2)
    with pytest.raises(StructuralError):
        predict.aggregate_areas(f, d, [], [], [])
    with pytest.raises(StructuralError):
        predict.aggregate_areas(f, d, [0], [10_000], [1.0])


# -- correlation curve -------------------------------------------------------

def test_correlation_curve(fitted_pair):
    f = fitted_pair["approximate"]
    d = np.linspace(0, 30, 31)
    c = predict.correlation_curve(f, d)
    assert c[0] == 1.0
    assert np.all(np.diff(c) <= 0)
    exp_model = type(f.model)(**{**f.model.__dict__, "spec": ModelSpec(family="exponential")})
    g = inf.FittedModel(f.laplace, f.hyper, f.objective, [], exp_model)
    assert predict.correlation_curve(g, [1 / f.rho])[0] == pytest.approx(math.exp(-1))


def test_grid_errors_leave_training_areas_unchanged_for_approximate(fitted_pair):
    # A2 e = eps holds exactly for grid errors, so training-area means agree
    f = fitted_pair["approximate"]
    d = predict.sample_posterior(f.laplace, 40, seed=6)
    _, a = predict.area_mean_draws(f, d, error_term="area")
    _, g = predict.area_mean_draws(f, d, error_term="grid", seed=1)
    np.testing.assert_allclose(g, a, rtol=1e-9)
    with pytest.raises(ValueError):
        predict.area_mean_draws(f, d, error_term="none")


def test_predictive_draws_survive_huge_means(fitted_pair):
    f = fitted_pair["approximate"]
    X = np.tile(f.laplace.mode, (3, 1))
    X[:, 0] = 60.0  # intercept far beyond any sensible intensity
    s = predict.aggregate_areas(f, with_draws(f, X))
    assert np.all(np.isfinite(s.pred_upper)) and np.all(s.pred_upper > 1e15)


def test_centered_spatial_term_differs_by_a_constant(fitted_pair):
    f = fitted_pair["exact"]
    d = with_draws(f, f.laplace.mode[None, :])
    c = predict.predict_grid(f, d, error_term="none")
    raw = predict.predict_grid(f, d, error_term="none", center_spatial=False)
    assert abs(c.spatial_median.mean()) < 1e-12
    diff = raw.spatial_median - c.spatial_median
    np.testing.assert_allclose(diff, diff[0], atol=1e-12)
    np.testing.assert_array_equal(c.median, raw.median)
