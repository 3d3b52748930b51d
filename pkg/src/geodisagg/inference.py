"""Laplace approximation and hyperparameter search.

For fixed penalties ``lam`` and inverse range ``rho`` the latent vector has
a Gaussian prior with precision Q; :func:`laplace_mode` finds the mode of
the conditional posterior by damped Newton.  :func:`log_hyperposterior`
plugs that mode into the Laplace approximation of the marginal likelihood
and adds the Gamma-mixed-Gamma hyperpriors on the log scale; :func:`fit`
maximizes it from several starting ranges.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.optimize import minimize
from scipy.special import gammaln

from . import model as mdl
from .errors import FitError, GeodisaggError, NumericalError

log = logging.getLogger(__name__)

NEWTON_GTOL = 1e-6
NEWTON_FTOL = 1e-9
NEWTON_MAXITER = 100


@dataclass(frozen=True)
class Hyperparameters:
    v: np.ndarray
    v_rho: float

    @property
    def lam(self) -> np.ndarray:
        return np.exp(self.v)

    @property
    def rho(self) -> float:
        return float(np.exp(self.v_rho))

    def as_vector(self) -> np.ndarray:
        return np.append(self.v, self.v_rho)

    @classmethod
    def from_vector(cls, x) -> "Hyperparameters":
        x = np.asarray(x, dtype=float)
        return cls(x[:-1].copy(), float(x[-1]))


@dataclass(frozen=True, eq=False)
class LaplaceFit:
    mode: np.ndarray
    chol: np.ndarray  # lower factor of the negative Hessian at the mode
    log_posterior: float
    loglik: float
    quad_form: float
    logdet_neg_hessian: float
    logdet_Q: float
    iterations: int
    converged: bool
    grad_norm: float
    at_cap: bool = False

    @property
    def cov(self) -> np.ndarray:
        """Inverse negative Hessian at the mode."""
        Linv = sla.solve_triangular(self.chol, np.eye(len(self.chol)), lower=True)
        return Linv.T @ Linv


@dataclass(eq=False)
class FittedModel:
    laplace: LaplaceFit
    hyper: Hyperparameters
    objective: float
    restarts: list
    model: mdl.AssembledModel
    n_failed: int = 0

    @property
    def spec(self) -> mdl.ModelSpec:
        return self.model.spec

    @property
    def rho(self) -> float:
        return self.hyper.rho


class _Evaluator:
    """Objective, gradient and Hessian at fixed (lam, rho).

    Holds the rho-dependent design so repeated evaluations inside Newton do
    not rebuild it.
    """

    def __init__(self, model: mdl.AssembledModel, lam, rho: float):
        self.model = model
        self.lam = np.asarray(lam, dtype=float)
        self.rho = float(rho)
        self.y = model.y
        self.Q, self.logdet_Q = model.precision_and_logdet(self.lam, self.rho)
        if model.estimator == "exact":
            self.C = model.cell_design(self.rho)
            P = model.problem
            self.w = P.coverage * P.population[P.member_cell]
        else:
            self.C = model.area_design(self.rho)

    # -- likelihood pieces ---------------------------------------------
    def _mu(self, xi):
        m = self.model
        if m.estimator == "exact":
            eta = mdl.stacked_predictor(m, xi, self.rho, self.C)
            capped = bool(np.any(np.abs(eta) > mdl.ETA_CAP))
            t = self.w * np.exp(np.clip(eta, -mdl.ETA_CAP, mdl.ETA_CAP))
            mu = np.bincount(m.problem.member_area, weights=t, minlength=m.problem.n)
            return mu, t, capped
        eta = self.C @ xi
        capped = bool(np.any(np.abs(eta) > mdl.ETA_CAP))
        mu = np.exp(np.clip(eta, -mdl.ETA_CAP, mdl.ETA_CAP) + m.log_m)
        return mu, None, capped

    def loglik(self, xi, mu=None):
        if mu is None:
            mu = self._mu(xi)[0]
        y = self.y
        pos = y > 0
        if np.any(mu[pos] <= 0):
            return -np.inf
        return float(np.sum(y[pos] * np.log(mu[pos])) - np.sum(mu))

    def objective(self, xi):
        mu, _, _ = self._mu(xi)
        return self.loglik(xi, mu) - 0.5 * float(xi @ self.Q @ xi)

    def grad_hess(self, xi, fisher=False):
        m = self.model
        y = self.y
        mu, t, _ = self._mu(xi)
        if not np.all(np.isfinite(mu)) or np.any(mu <= 0):
            raise NumericalError("non-finite or zero area mean in derivative evaluation")
        Qxi = self.Q @ xi
        if m.estimator != "exact":
            C = self.C
            g = C.T @ (y - mu) - Qxi
            H = -(C.T * mu) @ C - self.Q
            return g, H
        P = m.problem
        lay = m.layout
        C = self.C
        n, nc = P.n, P.n_cells
        r = y / mu - 1.0
        rt = r[P.member_area] * t
        omega_cells = np.bincount(P.member_cell, weights=rt, minlength=nc)
        g = np.empty(m.dim)
        g[lay.cell_part] = C.T @ omega_cells
        g[lay.eps] = y - mu
        g -= Qxi

        T = sp.csr_matrix((t, (P.member_area, P.member_cell)), shape=(n, nc))
        D0 = np.asarray(T @ C)  # d mu_i / d xi_cell
        D = np.hstack([D0, np.diag(mu)])
        H = -(D.T * (y / mu**2)) @ D if not fisher else -(D.T * (1.0 / mu)) @ D
        if not fisher:
            d0 = C.shape[1]
            M = sp.csr_matrix((rt, (P.member_cell, P.member_area)), shape=(nc, n))
            H[:d0, :d0] += (C.T * omega_cells) @ C
            cross = np.asarray((M.T @ C)).T
            H[:d0, d0:] += cross
            H[d0:, :d0] += cross.T
            H[d0:, d0:] += np.diag(r * mu)
        H -= self.Q
        return g, 0.5 * (H + H.T)


def log_conditional_posterior(model: mdl.AssembledModel, xi, lam, rho: float) -> float:
    """sum_i (y_i log mu_i - mu_i) - xi'Q xi / 2, dropping xi-free constants."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (model.dim,):
        raise ValueError(f"parameter vector has length {xi.size}, expected {model.dim}")
    ev = _Evaluator(model, lam, rho)
    val = ev.objective(xi)
    if val == -np.inf:
        log.debug("zero mean for an area with positive count")
    return val


def gradient_and_hessian(model: mdl.AssembledModel, xi, lam, rho: float):
    ev = _Evaluator(model, lam, rho)
    g, H = ev.grad_hess(np.asarray(xi, dtype=float))
    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(H))):
        raise NumericalError("non-finite gradient or Hessian")
    return g, H


def _chol_neg(H):
    try:
        return np.linalg.cholesky(-H)
    except np.linalg.LinAlgError:
        return None


def _newton(ev: _Evaluator, xi0, maxiter=NEWTON_MAXITER, gtol=NEWTON_GTOL, ftol=NEWTON_FTOL):
    xi = np.array(xi0, dtype=float)
    f = ev.objective(xi)
    if not np.isfinite(f):
        xi = np.zeros_like(xi)
        f = ev.objective(xi)
    converged = False
    it = 0
    for it in range(1, maxiter + 1):
        g, H = ev.grad_hess(xi)
        if np.max(np.abs(g)) < gtol:
            converged = True
            break
        L = _chol_neg(H)
        if L is None:
            # observed Hessian indefinite away from the mode: use expected information
            g, H = ev.grad_hess(xi, fisher=True)
            L = _chol_neg(H)
            if L is None:
                raise NumericalError("negative Hessian is not positive definite")
        delta = sla.cho_solve((L, True), g)
        step = 1.0
        while step > 1e-10:
            cand = xi + step * delta
            f_new = ev.objective(cand)
            if np.isfinite(f_new) and f_new >= f:
                break
            step *= 0.5
        else:
            break
        rel = abs(f_new - f) / max(1.0, abs(f))
        xi, f = cand, f_new
        if rel < ftol:
            converged = True
            break
    return xi, f, it, converged


def _finish(ev: _Evaluator, xi, f, it, converged) -> LaplaceFit:
    g, H = ev.grad_hess(xi)
    L = _chol_neg(H)
    if L is None:
        cond = np.linalg.cond(-H)
        raise NumericalError(f"negative Hessian at the mode is not positive definite (cond {cond:.3e})")
    _, _, capped = ev._mu(xi)
    ll = ev.loglik(xi)
    quad = float(xi @ ev.Q @ xi)
    if capped:
        converged = False
    return LaplaceFit(
        mode=xi,
        chol=L,
        log_posterior=float(f),
        loglik=ll,
        quad_form=quad,
        logdet_neg_hessian=float(2.0 * np.sum(np.log(np.diag(L)))),
        logdet_Q=ev.logdet_Q,
        iterations=it,
        converged=bool(converged),
        grad_norm=float(np.max(np.abs(g))),
        at_cap=capped,
    )


def laplace_mode(model: mdl.AssembledModel, lam, rho: float, xi0=None) -> LaplaceFit:
    """Posterior mode and Gaussian approximation at fixed hyperparameters."""
    ev = _Evaluator(model, lam, rho)
    xi0 = np.zeros(model.dim) if xi0 is None else np.asarray(xi0, dtype=float)
    xi, f, it, converged = _newton(ev, xi0)
    return _finish(ev, xi, f, it, converged)


# -- hyperpriors -------------------------------------------------------------

def log_penalty_prior(lam, priors: mdl.PriorSpec):
    """Log density of lam after integrating out its Gamma-distributed rate.

    lam | delta ~ Gamma(nu/2, nu*delta/2) and delta ~ Gamma(a, b) give
    p(lam) = c * lam^(nu/2-1) * (b + nu*lam/2)^-(a+nu/2).
    """
    lam = np.asarray(lam, dtype=float)
    a, b, h = priors.a_delta, priors.b_delta, priors.nu / 2.0
    const = gammaln(a + h) - gammaln(a) - gammaln(h) + h * np.log(h) + a * np.log(b)
    return const + (h - 1.0) * np.log(lam) - (a + h) * np.log(b + h * lam)


def log_hyperprior(v, v_rho, priors: mdl.PriorSpec) -> float:
    """Hyperprior on the log scale, including the log-transform Jacobians."""
    v = np.asarray(v, dtype=float)
    lp = np.sum(log_penalty_prior(np.exp(v), priors)) + np.sum(v)
    lp += float(log_penalty_prior(np.exp(v_rho), priors)) + v_rho
    return float(lp)


def laplace_log_marginal(fit: LaplaceFit) -> float:
    """Laplace approximation of log integral p(y|xi) N(xi; 0, Q^-1) dxi."""
    return fit.loglik - 0.5 * fit.quad_form + 0.5 * fit.logdet_Q - 0.5 * fit.logdet_neg_hessian


def log_hyperposterior(model: mdl.AssembledModel, v, v_rho: float, xi0=None,
                       return_fit: bool = False):
    """Approximate log posterior of (log lam, log rho), up to a constant.

    Returns ``-inf`` (and ``None`` as the fit) when the inner mode search
    fails so that an optimizer simply retreats.
    """
    v = np.asarray(v, dtype=float)
    try:
        if not (np.all(np.isfinite(v)) and np.isfinite(v_rho)):
            raise NumericalError("non-finite hyperparameters")
        if np.any(np.abs(v) > 50) or abs(v_rho) > 50:
            raise NumericalError("hyperparameters out of range")
        fit = laplace_mode(model, np.exp(v), math.exp(v_rho), xi0)
        if fit.at_cap:
            raise NumericalError("mode sits at the linear-predictor cap")
        val = laplace_log_marginal(fit) + log_hyperprior(v, v_rho, model.spec.priors)
        if not np.isfinite(val):
            raise NumericalError("non-finite marginal")
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        log.debug("hyperposterior evaluation failed at v=%s v_rho=%s: %s", v, v_rho, exc)
        return (-np.inf, None) if return_fit else -np.inf
    return (val, fit) if return_fit else val


# -- multi-start search ------------------------------------------------------

def domain_diameter(coords) -> float:
    c = np.asarray(coords, dtype=float)
    span = c.max(axis=0) - c.min(axis=0)
    return float(max(np.hypot(*span), 1e-12))


def _run_restart(model, x0, simplex_step, maxfev, fatol, xatol, rho_bounds=None):
    cache = {"xi": None, "best": (-np.inf, None, None)}

    def neg(x):
        x = np.asarray(x, dtype=float)
        val, fit = log_hyperposterior(model, x[:-1], x[-1], xi0=cache["xi"], return_fit=True)
        if fit is not None:
            cache["xi"] = fit.mode
            if val > cache["best"][0]:
                cache["best"] = (val, x.copy(), fit)
        return -val if np.isfinite(val) else np.inf

    dim = len(x0)
    steps = simplex_step * np.eye(dim)
    bounds = None
    if rho_bounds is not None:
        lo, hi = rho_bounds
        # step the range coordinate inward so the simplex starts inside the box
        if x0[-1] + simplex_step > hi:
            steps[-1, -1] = -simplex_step
        bounds = [(None, None)] * (dim - 1) + [(lo, hi)]
    simplex = np.vstack([x0, x0 + steps])
    res = minimize(neg, x0, method="Nelder-Mead", bounds=bounds,
                   options={"initial_simplex": simplex, "maxfev": maxfev,
                            "fatol": fatol, "xatol": xatol})
    best_val, best_x, best_fit = cache["best"]
    return {
        "x": best_x,
        "objective": best_val,
        "fit": best_fit,
        "n_evals": int(res.nfev),
        "converged": bool(res.success),
        "message": str(res.message),
    }


def fit(problem, spec: mdl.ModelSpec, seed=0, restarts: int = 25, threads: int = 1,
        model: mdl.AssembledModel | None = None, maxfev: int = 400,
        fatol: float = 1e-6, xatol: float = 1e-3, simplex_step: float = 1.0,
        bound_range: bool = True) -> FittedModel:
    """Maximize the approximate hyperparameter posterior from several starts.

    Each restart starts at log-penalties 0 and a log inverse range drawn
    uniformly on [log(1/D), log(100/D)], D the diameter of the grid.  The
    restart with the highest objective wins.  With ``bound_range`` the search
    over the log inverse range stays inside that same bracket; without it the
    likelihood surface can drift to ranges far below the knot spacing where
    the basis collapses onto the knots.  Restarts are independent and
    run on ``threads`` worker threads; the result does not depend on it.
    """
    if restarts < 1:
        raise ValueError("restarts must be at least 1")
    if model is None:
        model = mdl.assemble(problem, spec, seed=seed)
    D = domain_diameter(problem.coords)
    rng = np.random.default_rng(seed)
    bracket = (np.log(1.0 / D), np.log(100.0 / D))
    starts = rng.uniform(*bracket, size=restarts)
    q = spec.q

    def job(k):
        x0 = np.append(np.zeros(q + 2), starts[k])
        try:
            return _run_restart(model, x0, simplex_step, maxfev, fatol, xatol,
                                bracket if bound_range else None)
        except GeodisaggError as exc:
            return {"x": None, "objective": -np.inf, "fit": None, "n_evals": 0,
                    "converged": False, "message": f"{type(exc).__name__}: {exc}"}

    if threads > 1 and restarts > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, range(restarts)))
    else:
        results = [job(k) for k in range(restarts)]

    table = []
    for k, res in enumerate(results):
        row = {"restart": k, "init_v_rho": float(starts[k]), "objective": float(res["objective"]),
               "n_evals": res["n_evals"], "converged": res["converged"], "message": res["message"]}
        x = res["x"]
        for j in range(q + 2):
            row[f"v{j + 1}"] = float(x[j]) if x is not None else float("nan")
        row["v_rho"] = float(x[-1]) if x is not None else float("nan")
        table.append(row)

    ok = [k for k, r in enumerate(results) if r["fit"] is not None and np.isfinite(r["objective"])]
    if not ok:
        raise FitError("all restarts failed", diagnostics=table)
    best = max(ok, key=lambda k: (results[k]["objective"], -k))
    r = results[best]
    return FittedModel(
        laplace=r["fit"],
        hyper=Hyperparameters.from_vector(r["x"]),
        objective=float(r["objective"]),
        restarts=table,
        model=model,
        n_failed=restarts - len(ok),
    )


def refit_at(model: mdl.AssembledModel, hyper: Hyperparameters) -> FittedModel:
    """Laplace fit at given hyperparameters (used when reloading a saved fit)."""
    val, fit_ = log_hyperposterior(model, hyper.v, hyper.v_rho, return_fit=True)
    if fit_ is None:
        raise FitError("Laplace fit failed at the stored hyperparameters")
    return FittedModel(laplace=fit_, hyper=hyper, objective=float(val), restarts=[], model=model)
