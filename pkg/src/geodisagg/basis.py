"""Correlation functions, low-rank kriging bases, knots and P-spline pieces."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline
from scipy.spatial.distance import cdist, pdist

from .errors import NumericalError

FAMILIES = ("exponential", "matern32", "spherical", "circular")

DEFAULT_NUGGET = 1e-8
MAX_CANDIDATES = 5000


def _check_family(family):
    if family not in FAMILIES:
        raise ValueError(f"unknown correlation family {family!r}; expected one of {FAMILIES}")


def correlation(family: str, rho: float, d):
    """Evaluate the isotropic correlation ``R_rho(d)``.

    ``rho`` is the inverse range; ``d`` may be a scalar or any array of
    nonnegative distances.  Returns an array of the same shape as ``d``
    (a float for scalar input).
    """
    _check_family(family)
    if not rho > 0:
        raise ValueError(f"rho must be positive, got {rho}")
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("distances must be nonnegative")
    x = rho * d
    if family == "exponential":
        out = np.exp(-x)
    elif family == "matern32":
        out = np.exp(-x) * (1.0 + x)
    elif family == "spherical":
        out = np.where(x <= 1.0, 1.0 - 1.5 * x + 0.5 * x**3, 0.0)
    else:
        t = np.minimum(x, 1.0)
        out = 1.0 - (2.0 / np.pi) * (t * np.sqrt(1.0 - t * t) + np.arcsin(t))
    out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class KnotSet:
    knots: np.ndarray
    selection_seed: int | None = None

    @property
    def S(self) -> int:
        return len(self.knots)


def _min_pair(dist):
    """Smallest off-diagonal distance and how many pairs attain it."""
    iu = np.triu_indices(len(dist), 1)
    vals = dist[iu]
    m = vals.min()
    return m, int(np.count_nonzero(vals <= m * (1 + 1e-12)))


def select_knots(candidates, S: int, seed=0, max_sweeps: int = 50) -> KnotSet:
    """Choose ``S`` space-filling knots from ``candidates``.

    Greedy farthest-point seeding from a random start, then single-point
    swaps.  A swap is accepted when it raises the minimum pairwise distance,
    or keeps it while reducing the number of pairs at that distance.
    """
    cand = np.unique(np.asarray(candidates, dtype=float).reshape(-1, 2), axis=0)
    if S < 1:
        raise ValueError("S must be at least 1")
    if S > len(cand):
        raise ValueError(f"cannot select {S} knots from {len(cand)} distinct candidates")
    rng = np.random.default_rng(seed)
    if len(cand) > MAX_CANDIDATES:
        cand = cand[np.sort(rng.choice(len(cand), MAX_CANDIDATES, replace=False))]
    if S == len(cand):
        return KnotSet(cand.copy(), seed)

    chosen = [int(rng.integers(len(cand)))]
    mind = cdist(cand, cand[chosen[:1]]).ravel()
    for _ in range(S - 1):
        nxt = int(np.argmax(mind))
        chosen.append(nxt)
        mind = np.minimum(mind, cdist(cand, cand[nxt:nxt + 1]).ravel())

    if S > 2:
        chosen = np.array(chosen)
        for _ in range(max_sweeps):
            dist = cdist(cand[chosen], cand[chosen])
            np.fill_diagonal(dist, np.inf)
            best, count = _min_pair(dist)
            improved = False
            i, j = np.unravel_index(np.argmin(dist), dist.shape)
            for k in (i, j):
                rest = np.delete(chosen, k)
                d_rest = cdist(cand[rest], cand[rest])
                np.fill_diagonal(d_rest, np.inf)
                rest_min, _ = _min_pair(d_rest)
                to_rest = cdist(cand, cand[rest]).min(axis=1)
                to_rest[rest] = -np.inf
                c = int(np.argmax(to_rest))
                new_min = min(rest_min, to_rest[c])
                if new_min <= best * (1 + 1e-12):
                    if new_min < best * (1 - 1e-12):
                        continue
                    trial = chosen.copy()
                    trial[k] = c
                    dt = cdist(cand[trial], cand[trial])
                    np.fill_diagonal(dt, np.inf)
                    if _min_pair(dt)[1] >= count:
                        continue
                chosen[k] = c
                improved = True
                break
            if not improved:
                break
        chosen = chosen.tolist()
    return KnotSet(cand[np.asarray(chosen)], seed)


def knot_candidates(points, seed=0) -> np.ndarray:
    """All points when there are few, else a seed-fixed subsample."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) <= MAX_CANDIDATES:
        return pts
    rng = np.random.default_rng(seed)
    return pts[np.sort(rng.choice(len(pts), MAX_CANDIDATES, replace=False))]


def default_knot_count(n_areas: int) -> int:
    return int(min(350, 2 * n_areas))


def spatial_basis(points, knots: KnotSet | np.ndarray, rho: float, family: str) -> np.ndarray:
    """Matrix of correlations between each point and each knot."""
    k = knots.knots if isinstance(knots, KnotSet) else np.asarray(knots, dtype=float)
    return correlation(family, rho, cdist(np.asarray(points, dtype=float).reshape(-1, 2), k))


def knot_precision(knots: KnotSet | np.ndarray, rho: float, family: str) -> np.ndarray:
    """Knot-to-knot correlation matrix Omega (no nugget)."""
    k = knots.knots if isinstance(knots, KnotSet) else np.asarray(knots, dtype=float)
    omega = correlation(family, rho, cdist(k, k))
    return np.atleast_2d(0.5 * (omega + omega.T))


def cholesky_with_nugget(omega: np.ndarray, nugget: float = DEFAULT_NUGGET) -> np.ndarray:
    """Lower Cholesky factor of ``omega + nugget*I``.

    Raises NumericalError with the smallest eigenvalue when the matrix is
    not positive definite even after the nugget.
    """
    a = omega + nugget * np.eye(len(omega))
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        lam_min = float(np.linalg.eigvalsh(a)[0])
        raise NumericalError(
            f"knot correlation matrix not positive definite after nugget {nugget:g}; "
            f"smallest eigenvalue {lam_min:.3e}"
        ) from None


@dataclass(frozen=True)
class SplineBasisSpec:
    K: int = 15
    degree: int = 3
    penalty_order: int = 2

    def __post_init__(self):
        if self.K < self.degree + 1:
            raise ValueError(f"K={self.K} is too small for degree {self.degree}")
        if not 0 <= self.penalty_order < self.K:
            raise ValueError("penalty order must lie in [0, K)")

    @classmethod
    def from_df(cls, df: int, degree: int = 3, penalty_order: int = 2) -> "SplineBasisSpec":
        return cls(K=int(df) + penalty_order, degree=degree, penalty_order=penalty_order)


def spline_domain(values, extend: float = 0.01) -> tuple[float, float]:
    """Observed range widened by ``extend`` of its width on each side."""
    v = np.asarray(values, dtype=float)
    lo, hi = float(np.min(v)), float(np.max(v))
    pad = extend * (hi - lo)
    return lo - pad, hi + pad


def _clamped_knots(spec: SplineBasisSpec, lo: float, hi: float) -> np.ndarray:
    n_inner = spec.K - spec.degree - 1
    inner = np.linspace(lo, hi, n_inner + 2)[1:-1]
    return np.concatenate([[lo] * (spec.degree + 1), inner, [hi] * (spec.degree + 1)])


def bspline_basis(values, spec: SplineBasisSpec, domain, return_clamped: bool = False):
    """B-spline design matrix on a clamped uniform knot vector over ``domain``.

    Values outside the domain are clamped to its ends.  With
    ``return_clamped`` the number of clamped values is returned as well.
    """
    lo, hi = map(float, domain)
    if not hi > lo:
        raise ValueError(f"degenerate spline domain [{lo}, {hi}]")
    x = np.asarray(values, dtype=float).ravel()
    n_clamped = int(np.count_nonzero((x < lo) | (x > hi)))
    x = np.clip(x, lo, hi)
    t = _clamped_knots(spec, lo, hi)
    B = BSpline.design_matrix(x, t, spec.degree).toarray()
    return (B, n_clamped) if return_clamped else B


def difference_penalty(K: int, order: int) -> np.ndarray:
    """Penalty D'D built from the ``order``-th difference matrix."""
    if not 0 <= order < K:
        raise ValueError("difference order must lie in [0, K)")
    D = np.diff(np.eye(K), n=order, axis=0)
    return D.T @ D
