"""Design matrices, prior precision and mean functions of the geoadditive model.

The parameter vector is ordered as (beta, theta_1..theta_q, u, eps) where beta
holds the intercept, the linear covariate slopes and the two coordinate slopes.
Everything except the area effects ``eps`` acts at the cell level, so the
model stores a cell-level design ``[X | B_1 .. B_q | Phi(rho)]`` and maps it
onto areas with the sparse weight matrices from :mod:`geodisagg.geometry`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.linalg import block_diag
from scipy.spatial.distance import cdist

from . import basis, geometry
from .basis import KnotSet, SplineBasisSpec
from .errors import StructuralError

log = logging.getLogger(__name__)

ETA_CAP = 50.0


@dataclass(frozen=True)
class PriorSpec:
    zeta: float = 1e-5
    nu: float = 3.0
    a_delta: float = 1e-5
    b_delta: float = 1e-5

    def __post_init__(self):
        for name in ("zeta", "nu", "a_delta", "b_delta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"prior parameter {name} must be positive")


@dataclass(frozen=True)
class ModelSpec:
    linear_covariates: tuple[str, ...] = ()
    smooth_covariates: Mapping[str, SplineBasisSpec] = field(default_factory=dict)
    family: str = "matern32"
    n_knots: int | None = None
    estimator: str = "approximate"
    weighting: str = "population"
    priors: PriorSpec = field(default_factory=PriorSpec)
    nugget: float = basis.DEFAULT_NUGGET
    ridge: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "linear_covariates", tuple(self.linear_covariates))
        smooth = self.smooth_covariates
        if not isinstance(smooth, Mapping):
            smooth = {name: SplineBasisSpec() for name in smooth}
        object.__setattr__(self, "smooth_covariates", dict(smooth))
        if self.family not in basis.FAMILIES:
            raise ValueError(f"unknown correlation family {self.family!r}; expected one of {basis.FAMILIES}")
        if self.estimator not in geometry.ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}; expected one of {geometry.ESTIMATORS}")
        if self.weighting not in geometry.WEIGHTINGS:
            raise ValueError(f"unknown weighting {self.weighting!r}; expected one of {geometry.WEIGHTINGS}")
        if self.n_knots is not None and self.n_knots < 1:
            raise ValueError("n_knots must be at least 1")

    @property
    def p(self) -> int:
        return len(self.linear_covariates)

    @property
    def q(self) -> int:
        return len(self.smooth_covariates)


@dataclass(frozen=True)
class ParameterLayout:
    """Offsets of each block inside the parameter vector."""

    n_beta: int
    spline_sizes: tuple[int, ...]
    S: int
    n: int

    @property
    def dim(self) -> int:
        return self.n_beta + sum(self.spline_sizes) + self.S + self.n

    @property
    def beta(self) -> slice:
        return slice(0, self.n_beta)

    def theta(self, j: int) -> slice:
        start = self.n_beta + sum(self.spline_sizes[:j])
        return slice(start, start + self.spline_sizes[j])

    @property
    def u(self) -> slice:
        start = self.n_beta + sum(self.spline_sizes)
        return slice(start, start + self.S)

    @property
    def eps(self) -> slice:
        return slice(self.dim - self.n, self.dim)

    @property
    def cell_part(self) -> slice:
        """Everything that acts at the cell level (all but eps)."""
        return slice(0, self.dim - self.n)


@dataclass(eq=False)
class AssembledModel:
    """Fixed pieces of the model for one problem and specification.

    Only the kriging basis depends on ``rho``; :meth:`cell_design` and
    :meth:`area_design` rebuild it on demand and are safe to call from
    several threads.
    """

    problem: geometry.DisaggregationProblem
    spec: ModelSpec
    knots: KnotSet
    layout: ParameterLayout
    coord_center: np.ndarray
    coord_scale: np.ndarray
    spline_domains: dict
    fixed_cells: np.ndarray
    knot_dist_cells: np.ndarray
    knot_dist: np.ndarray
    penalties: list
    penalty_eigs: list
    G: np.ndarray
    A1: sp.csr_matrix | None = None
    W2: sp.csr_matrix | None = None
    log_m: np.ndarray | None = None
    W2_fixed: np.ndarray | None = None
    eps_to_cells: sp.csr_matrix | None = None
    n_clamped: int = 0

    @property
    def estimator(self) -> str:
        return self.spec.estimator

    @property
    def y(self) -> np.ndarray:
        return self.problem.counts.astype(float)

    @property
    def dim(self) -> int:
        return self.layout.dim

    # -- design ---------------------------------------------------------
    def phi_cells(self, rho: float) -> np.ndarray:
        return basis.correlation(self.spec.family, rho, self.knot_dist_cells)

    def cell_design(self, rho: float) -> np.ndarray:
        """``[X | B | Phi(rho)]`` over the problem's cells."""
        return np.hstack([self.fixed_cells, self.phi_cells(rho)])

    def area_design(self, rho: float) -> np.ndarray:
        """Approximate-estimator design ``A2 C`` (n x dim), eps block = identity."""
        if self.W2 is None:
            raise ValueError("area_design is only defined for the approximate estimator")
        phi = np.asarray(self.W2 @ self.phi_cells(rho))
        return np.hstack([self.W2_fixed, phi, np.eye(self.problem.n)])

    def stacked_design(self, rho: float) -> np.ndarray:
        """Full N x dim matrix ``[X : B : Phi : E]`` (dense; small problems only)."""
        P = self.problem
        C = self.cell_design(rho)[P.member_cell]
        return np.hstack([C, geometry.build_E(P).toarray()])

    def new_cell_design(self, coords, covariates: Mapping[str, np.ndarray], rho: float,
                        return_clamped: bool = False):
        """Cell-level design for arbitrary target cells."""
        X, B, n_clamped = self._fixed_blocks(np.asarray(coords, dtype=float).reshape(-1, 2), covariates)
        phi = basis.spatial_basis(coords, self.knots, rho, self.spec.family)
        C = np.hstack([X, B, phi])
        return (C, n_clamped) if return_clamped else C

    def _fixed_blocks(self, coords, covariates):
        return _fixed_blocks(self.spec, coords, covariates, self.coord_center,
                             self.coord_scale, self.spline_domains)

    # -- prior ----------------------------------------------------------
    def precision(self, lam, rho: float) -> np.ndarray:
        """Dense block-diagonal prior precision Q(lambda, rho)."""
        return self.precision_and_logdet(lam, rho)[0]

    def precision_and_logdet(self, lam, rho: float):
        lam = np.asarray(lam, dtype=float)
        q = self.spec.q
        if lam.shape != (q + 2,):
            raise ValueError(f"expected {q + 2} penalty parameters, got {lam.shape}")
        pri = self.spec.priors
        nb = self.layout.n_beta
        blocks = [pri.zeta * np.eye(nb)]
        logdet = nb * np.log(pri.zeta)
        for j, (P, eig) in enumerate(zip(self.penalties, self.penalty_eigs)):
            blocks.append(lam[j] * P + self.spec.ridge * np.eye(len(P)))
            logdet += np.sum(np.log(lam[j] * eig + self.spec.ridge))
        omega = basis.correlation(self.spec.family, rho, self.knot_dist)
        omega = np.atleast_2d(0.5 * (omega + omega.T))
        Lo = basis.cholesky_with_nugget(omega, self.spec.nugget)
        S = len(omega)
        blocks.append(lam[q] * (omega + self.spec.nugget * np.eye(S)))
        logdet += S * np.log(lam[q]) + 2.0 * np.sum(np.log(np.diag(Lo)))
        blocks.append(np.diag(lam[q + 1] * self.G))
        logdet += self.problem.n * np.log(lam[q + 1]) + np.sum(np.log(self.G))
        return block_diag(*blocks), float(logdet)


def _fixed_blocks(spec, coords, covariates, center, scale, domains):
    n_cells = len(coords)
    cols = [np.ones(n_cells)]
    for name in spec.linear_covariates:
        if name not in covariates:
            raise StructuralError(f"linear covariate {name!r} missing from cells")
        cols.append(np.asarray(covariates[name], dtype=float))
    std = (coords - center) / scale
    cols.extend([std[:, 0], std[:, 1]])
    X = np.column_stack(cols)
    Bs = []
    n_clamped = 0
    for name, sspec in spec.smooth_covariates.items():
        if name not in covariates:
            raise StructuralError(f"smooth covariate {name!r} missing from cells")
        B, nc = basis.bspline_basis(covariates[name], sspec, domains[name], return_clamped=True)
        n_clamped += nc
        Bs.append(B)
    B = np.hstack(Bs) if Bs else np.zeros((n_cells, 0))
    return X, B, n_clamped


def assemble(problem: geometry.DisaggregationProblem, spec: ModelSpec,
             knots: KnotSet | None = None, seed=0) -> AssembledModel:
    """Build every rho-independent piece of the model.

    Knots are chosen from the cell centres with :func:`basis.select_knots`
    unless given explicitly.
    """
    for name in (*spec.linear_covariates, *spec.smooth_covariates):
        if name not in problem.covariates:
            raise StructuralError(f"covariate {name!r} is not present on the cells")
    coords = problem.coords
    if knots is None:
        S = spec.n_knots or basis.default_knot_count(problem.n)
        cand = basis.knot_candidates(coords, seed)
        S = min(S, len(np.unique(cand, axis=0)))
        knots = basis.select_knots(cand, S, seed)
    center = coords.mean(axis=0)
    scale = coords.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    domains = {name: basis.spline_domain(problem.covariates[name]) for name in spec.smooth_covariates}
    X, B, n_clamped = _fixed_blocks(spec, coords, problem.covariates, center, scale, domains)
    fixed = np.hstack([X, B])
    penalties = [basis.difference_penalty(s.K, s.penalty_order) for s in spec.smooth_covariates.values()]
    layout = ParameterLayout(
        n_beta=X.shape[1],
        spline_sizes=tuple(s.K for s in spec.smooth_covariates.values()),
        S=knots.S,
        n=problem.n,
    )
    model = AssembledModel(
        problem=problem,
        spec=spec,
        knots=knots,
        layout=layout,
        coord_center=center,
        coord_scale=scale,
        spline_domains=domains,
        fixed_cells=fixed,
        knot_dist_cells=cdist(coords, knots.knots),
        knot_dist=cdist(knots.knots, knots.knots),
        penalties=penalties,
        penalty_eigs=[np.clip(np.linalg.eigvalsh(P), 0.0, None) for P in penalties],
        G=geometry.build_G(problem, spec.estimator, spec.weighting),
        eps_to_cells=geometry.cell_area_weights(problem),
        n_clamped=n_clamped,
    )
    if spec.estimator == "exact":
        model.A1 = geometry.build_A1(problem)
    else:
        m = geometry.area_population(problem)
        if np.any(m <= 0):
            bad = problem.area_ids[int(np.flatnonzero(m <= 0)[0])]
            raise StructuralError(f"area {bad} has zero population; the log offset is undefined")
        model.log_m = np.log(m)
        model.W2 = (geometry.build_A2(problem, spec.weighting) @ geometry.cell_selector(problem)).tocsr()
        model.W2_fixed = np.asarray(model.W2 @ fixed)
    return model


def _cap(eta):
    if np.any(np.abs(eta) > ETA_CAP):
        log.warning("linear predictor exceeds +/-%g; capping", ETA_CAP)
        return np.clip(eta, -ETA_CAP, ETA_CAP)
    return eta


def stacked_predictor(model: AssembledModel, xi, rho: float, C_cells=None) -> np.ndarray:
    """Linear predictor at every stacked row (cell part plus its area effect)."""
    P = model.problem
    lay = model.layout
    if C_cells is None:
        C_cells = model.cell_design(rho)
    eta_cells = C_cells @ xi[lay.cell_part]
    return eta_cells[P.member_cell] + xi[lay.eps][P.member_area]


def mean_exact(model: AssembledModel, xi, rho: float, C_cells=None) -> np.ndarray:
    """Area means as weighted sums of exponentiated cell-level predictors."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (model.dim,):
        raise ValueError(f"parameter vector has length {xi.size}, expected {model.dim}")
    A1 = model.A1 if model.A1 is not None else geometry.build_A1(model.problem)
    eta = _cap(stacked_predictor(model, xi, rho, C_cells))
    return A1 @ np.exp(eta)


def mean_approx(model: AssembledModel, xi, rho: float, C_area=None) -> np.ndarray:
    """Area means under the log-link approximation: m_i * exp(A2 C xi)."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (model.dim,):
        raise ValueError(f"parameter vector has length {xi.size}, expected {model.dim}")
    if C_area is None:
        C_area = model.area_design(rho)
    return np.exp(_cap(C_area @ xi) + model.log_m)


def mean(model: AssembledModel, xi, rho: float) -> np.ndarray:
    if model.estimator == "exact":
        return mean_exact(model, xi, rho)
    return mean_approx(model, xi, rho)


def layout_for(spec: ModelSpec, S: int, n: int) -> ParameterLayout:
    return ParameterLayout(3 + spec.p, tuple(s.K for s in spec.smooth_covariates.values()), S, n)
