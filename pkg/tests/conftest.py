import numpy as np
import pytest

from geodisagg.geometry import DisaggregationProblem


def grid_problem(nx=6, ny=6, block=2, seed=0, population=None, covariates=True):
    """Square grid tiled into block x block areas with random counts."""
    rng = np.random.default_rng(seed)
    xs, ys = np.arange(nx) + 0.5, np.arange(ny) + 0.5
    coords = np.array([(x, y) for y in ys for x in xs])
    n_cells = len(coords)
    per_row = nx // block
    area = (coords[:, 1] // block).astype(int) * per_row + (coords[:, 0] // block).astype(int)
    n_areas = area.max() + 1
    pop = rng.uniform(1, 5, n_cells) if population is None else np.broadcast_to(population, n_cells)
    cov = {"x1": rng.normal(size=n_cells), "z1": rng.uniform(0, 1, n_cells)} if covariates else {}
    return DisaggregationProblem.from_arrays(
        cell_ids=np.arange(n_cells),
        coords=coords,
        population=pop,
        covariates=cov,
        area_ids=np.arange(n_areas),
        counts=rng.poisson(8, n_areas),
        membership_area=area,
        membership_cell=np.arange(n_cells),
        membership_coverage=np.ones(n_cells),
    )


def single_cell_problem(n=4, seed=0, coverage=None):
    """Every area is exactly one cell."""
    rng = np.random.default_rng(seed)
    coords = rng.uniform(0, 10, (n, 2))
    cov = np.ones(n) if coverage is None else np.asarray(coverage, dtype=float)
    return DisaggregationProblem.from_arrays(
        cell_ids=np.arange(n),
        coords=coords,
        population=rng.uniform(2, 6, n),
        covariates={"x1": rng.normal(size=n), "z1": rng.uniform(0, 1, n)},
        area_ids=np.arange(n),
        counts=rng.poisson(10, n),
        membership_area=np.arange(n),
        membership_cell=np.arange(n),
        membership_coverage=cov,
    )


@pytest.fixture
def grid6():
    return grid_problem()


@pytest.fixture
def singles():
    return single_cell_problem()


# -- acceptance report ---------------------------------------------------------

ACCEPTANCE_RESULTS: dict[int, str] = {}


def record_acceptance(number: int, passed: bool, detail: str) -> bool:
    """Store one PASS/FAIL line; printed again in the terminal summary."""
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"
    ACCEPTANCE_RESULTS[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[k])
