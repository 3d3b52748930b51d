"""Grid cells, areas and the weight matrices that connect them.

Every matrix in this module is laid out over the *stacked rows*: memberships
are grouped area by area (in the order areas were declared) and, within an
area, kept in the order they were supplied.  Row ``k`` of the stack refers to
cell ``member_cell[k]`` inside area ``member_area[k]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import StructuralError

COVERAGE_TOL = 1e-9

ESTIMATORS = ("exact", "approximate")
WEIGHTINGS = ("population", "uniform")


class GridCell(NamedTuple):
    id: int
    center: tuple[float, float]
    population: float
    covariates: tuple[float, ...] = ()


class AreaMembership(NamedTuple):
    area_id: int
    cell_id: int
    coverage: float


@dataclass(frozen=True, eq=False)
class DisaggregationProblem:
    """Fine grid plus area-level counts, stored as flat arrays.

    Use :meth:`from_records` or :meth:`from_arrays` rather than the raw
    constructor; both validate the geometry and build the stacked layout.
    """

    cell_ids: np.ndarray
    coords: np.ndarray
    population: np.ndarray
    covariates: Mapping[str, np.ndarray]
    area_ids: np.ndarray
    counts: np.ndarray
    member_area: np.ndarray
    member_cell: np.ndarray
    coverage: np.ndarray
    _cell_index: dict = field(repr=False, default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.area_ids)

    @property
    def N(self) -> int:
        return len(self.member_cell)

    @property
    def n_cells(self) -> int:
        return len(self.cell_ids)

    @property
    def L(self) -> np.ndarray:
        """Number of memberships per area."""
        return np.bincount(self.member_area, minlength=self.n)

    @property
    def covariate_names(self) -> list[str]:
        return list(self.covariates)

    def cell_positions(self, cell_ids) -> np.ndarray:
        """Map external cell ids to row positions in the cell arrays."""
        try:
            return np.array([self._cell_index[int(c)] for c in np.atleast_1d(cell_ids)], dtype=np.intp)
        except KeyError as exc:
            raise StructuralError(f"unknown cell_id {exc.args[0]}") from None

    @classmethod
    def from_records(
        cls,
        cells: Sequence[GridCell],
        memberships: Sequence[AreaMembership],
        area_counts: Mapping[int, int],
        covariate_names: Sequence[str] = (),
    ) -> "DisaggregationProblem":
        covariate_names = list(covariate_names)
        cov = np.array([c.covariates for c in cells], dtype=float).reshape(len(cells), -1)
        if cov.shape[1] != len(covariate_names):
            raise StructuralError(
                f"cells carry {cov.shape[1]} covariates but {len(covariate_names)} names were declared"
            )
        return cls.from_arrays(
            cell_ids=[c.id for c in cells],
            coords=[c.center for c in cells],
            population=[c.population for c in cells],
            covariates={name: cov[:, j] for j, name in enumerate(covariate_names)},
            area_ids=list(area_counts),
            counts=list(area_counts.values()),
            membership_area=[m.area_id for m in memberships],
            membership_cell=[m.cell_id for m in memberships],
            membership_coverage=[m.coverage for m in memberships],
        )

    @classmethod
    def from_arrays(
        cls,
        cell_ids,
        coords,
        population,
        covariates: Mapping[str, Iterable[float]] | None,
        area_ids,
        counts,
        membership_area,
        membership_cell,
        membership_coverage,
    ) -> "DisaggregationProblem":
        cell_ids = np.asarray(cell_ids, dtype=np.int64)
        coords = np.asarray(coords, dtype=float).reshape(-1, 2)
        population = np.asarray(population, dtype=float)
        covariates = {k: np.asarray(v, dtype=float) for k, v in (covariates or {}).items()}
        area_ids = np.asarray(area_ids, dtype=np.int64)
        counts_f = np.asarray(counts, dtype=float)
        m_area = np.asarray(membership_area, dtype=np.int64)
        m_cell = np.asarray(membership_cell, dtype=np.int64)
        m_cov = np.asarray(membership_coverage, dtype=float)

        n_cells = len(cell_ids)
        if coords.shape[0] != n_cells or population.shape != (n_cells,):
            raise StructuralError("cell ids, coordinates and populations differ in length")
        for name, values in covariates.items():
            if values.shape != (n_cells,):
                raise StructuralError(f"covariate {name!r} has {values.size} values for {n_cells} cells")
        if np.any(population < 0) or not np.all(np.isfinite(population)):
            raise StructuralError("populations must be finite and nonnegative")
        cell_index = {int(c): i for i, c in enumerate(cell_ids)}
        if len(cell_index) != n_cells:
            raise StructuralError("duplicate cell_id")

        if counts_f.shape != area_ids.shape:
            raise StructuralError("area ids and counts differ in length")
        if np.any(counts_f < 0) or np.any(counts_f != np.round(counts_f)):
            raise StructuralError("area counts must be nonnegative integers")
        area_index = {int(a): i for i, a in enumerate(area_ids)}
        if len(area_index) != len(area_ids):
            raise StructuralError("duplicate area_id")

        if not (len(m_area) == len(m_cell) == len(m_cov)):
            raise StructuralError("membership columns differ in length")
        if np.any(m_cov <= 0) or np.any(m_cov > 1):
            bad = int(np.flatnonzero((m_cov <= 0) | (m_cov > 1))[0])
            raise StructuralError(
                f"coverage {m_cov[bad]} of (area {m_area[bad]}, cell {m_cell[bad]}) is outside (0, 1]"
            )
        try:
            pos_area = np.array([area_index[int(a)] for a in m_area], dtype=np.intp)
        except KeyError as exc:
            raise StructuralError(f"membership references area {exc.args[0]} which has no count") from None
        try:
            pos_cell = np.array([cell_index[int(c)] for c in m_cell], dtype=np.intp)
        except KeyError as exc:
            raise StructuralError(f"membership references unknown cell_id {exc.args[0]}") from None
        pairs = set(zip(pos_area.tolist(), pos_cell.tolist()))
        if len(pairs) != len(pos_area):
            raise StructuralError("duplicate (area_id, cell_id) membership")

        per_cell = np.bincount(pos_cell, weights=m_cov, minlength=n_cells)
        if np.any(per_cell > 1 + COVERAGE_TOL):
            bad = int(np.argmax(per_cell))
            raise StructuralError(
                f"cell {cell_ids[bad]} is covered {per_cell[bad]:.6g} times over (max 1)"
            )
        L = np.bincount(pos_area, minlength=len(area_ids))
        if np.any(L == 0):
            bad = int(np.flatnonzero(L == 0)[0])
            raise StructuralError(f"area {area_ids[bad]} has no memberships")

        order = np.argsort(pos_area, kind="stable")
        return cls(
            cell_ids=cell_ids,
            coords=coords,
            population=population,
            covariates=covariates,
            area_ids=area_ids,
            counts=counts_f.astype(np.int64),
            member_area=pos_area[order],
            member_cell=pos_cell[order],
            coverage=m_cov[order],
            _cell_index=cell_index,
        )

    def with_counts(self, counts) -> "DisaggregationProblem":
        """Same geometry, different observed counts."""
        counts = np.asarray(counts)
        if counts.shape != self.counts.shape:
            raise StructuralError("count vector has the wrong length")
        return DisaggregationProblem(
            self.cell_ids, self.coords, self.population, self.covariates, self.area_ids,
            counts.astype(np.int64), self.member_area, self.member_cell, self.coverage,
            self._cell_index,
        )


def _check_choice(value, choices, what):
    if value not in choices:
        raise ValueError(f"unknown {what} {value!r}; expected one of {choices}")


def _row_matrix(problem: DisaggregationProblem, values: np.ndarray) -> sp.csr_matrix:
    """n x N matrix with ``values[k]`` at (member_area[k], k)."""
    N = problem.N
    return sp.csr_matrix(
        (values, (problem.member_area, np.arange(N))), shape=(problem.n, N)
    )


def _area_sums(problem, values):
    return np.bincount(problem.member_area, weights=values, minlength=problem.n)


def stacked_weights(problem: DisaggregationProblem, estimator: str = "exact",
                    weighting: str = "population") -> np.ndarray:
    """Per stacked-row aggregation weights before normalization.

    ``a*m`` for the exact estimator; ``v*a`` for the approximate one, with
    ``v`` proportional to population or constant.
    """
    _check_choice(estimator, ESTIMATORS, "estimator")
    _check_choice(weighting, WEIGHTINGS, "weighting")
    if estimator == "exact" or weighting == "population":
        return problem.coverage * problem.population[problem.member_cell]
    return problem.coverage.copy()


def area_population(problem: DisaggregationProblem) -> np.ndarray:
    """m_i = sum over memberships of coverage * population."""
    return _area_sums(problem, problem.coverage * problem.population[problem.member_cell])


def build_A1(problem: DisaggregationProblem) -> sp.csr_matrix:
    """Exact-estimator weights: row i holds a_i(w_il) m(w_il) on its own stacked columns."""
    return _row_matrix(problem, problem.coverage * problem.population[problem.member_cell])


def build_A2(problem: DisaggregationProblem, weighting: str = "population") -> sp.csr_matrix:
    """Row-normalized weights of the within-area averaging operator."""
    w = stacked_weights(problem, "approximate", weighting)
    totals = _area_sums(problem, w)
    if np.any(totals <= 0):
        bad = problem.area_ids[int(np.flatnonzero(totals <= 0)[0])]
        raise StructuralError(
            f"area {bad} has zero total population; use weighting='uniform' for such data"
        )
    return _row_matrix(problem, w / totals[problem.member_area])


def build_E(problem: DisaggregationProblem) -> sp.csr_matrix:
    """N x n indicator of the area each stacked row belongs to."""
    N = problem.N
    return sp.csr_matrix(
        (np.ones(N), (np.arange(N), problem.member_area)), shape=(N, problem.n)
    )


def build_G(problem: DisaggregationProblem, estimator: str = "exact",
            weighting: str = "population") -> np.ndarray:
    """Diagonal of G as a length-n vector: (sum w)^2 / sum w^2 per area."""
    w = stacked_weights(problem, estimator, weighting)
    s1 = _area_sums(problem, w)
    s2 = _area_sums(problem, w * w)
    if np.any(s2 <= 0):
        bad = problem.area_ids[int(np.flatnonzero(s2 <= 0)[0])]
        raise StructuralError(f"area {bad} has all-zero aggregation weights")
    return s1 * s1 / s2


def cell_selector(problem: DisaggregationProblem) -> sp.csr_matrix:
    """N x n_cells matrix picking the cell of each stacked row."""
    N = problem.N
    return sp.csr_matrix(
        (np.ones(N), (np.arange(N), problem.member_cell)), shape=(N, problem.n_cells)
    )


def cell_area_weights(problem: DisaggregationProblem) -> sp.csr_matrix:
    """n_cells x n matrix of coverage fractions.

    Used to carry area-level effects down to cells; a cell split between
    areas receives the coverage-weighted average of their effects.
    """
    M = sp.csr_matrix(
        (problem.coverage, (problem.member_cell, problem.member_area)),
        shape=(problem.n_cells, problem.n),
    )
    tot = np.asarray(M.sum(axis=1)).ravel()
    scale = np.where(tot > 0, 1.0 / np.where(tot > 0, tot, 1.0), 0.0)
    return sp.diags(scale) @ M
