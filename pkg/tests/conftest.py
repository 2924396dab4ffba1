import numpy as np
import pytest

from dexdelay import (
    GridSpec,
    MarketParams,
    PriorityLadder,
    SolverOptions,
    build_problem,
    solve,
)

DESK_LADDER = PriorityLadder(fees=(100.0, 300.0, 500.0), rates=(2.0, 2.5, 3.0))


@pytest.fixture(scope="session")
def params():
    return MarketParams()


@pytest.fixture(scope="session")
def ladder():
    return DESK_LADDER


def make_problem(params, ladder, max_pending=1, volume_bound=28.0,
                 pending_cap=np.inf):
    return build_problem(params, ladder, max_pending=max_pending,
                         volume_bound=volume_bound, pending_cap=pending_cap)


@pytest.fixture(scope="session")
def small_problem(params, ladder):
    return make_problem(params, ladder)


@pytest.fixture(scope="session")
def small_grid(small_problem):
    return GridSpec.build(small_problem, t_steps=60, s_count=21, z_count=21,
                          q_count=21)


@pytest.fixture(scope="session")
def small_solve(small_problem, small_grid):
    return solve(small_problem, small_grid, SolverOptions())


@pytest.fixture(scope="session")
def desk_problem(params, ladder):
    return make_problem(params, ladder)


@pytest.fixture(scope="session")
def desk_grid(desk_problem):
    return GridSpec.build(desk_problem, t_steps=200)


@pytest.fixture(scope="session")
def desk_solve(desk_problem, desk_grid):
    """Full default-scale solve shared across the acceptance criteria."""
    return solve(desk_problem, desk_grid, SolverOptions())
