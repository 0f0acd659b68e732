import numpy as np
import pytest

import sconce as sc


@pytest.fixture(scope="session")
def grid1000():
    return sc.TimeGrid(1.0, 1000)


@pytest.fixture(scope="session")
def arctan_ic():
    return sc.InitialConditionSpec.arctan_shift(0.1)


@pytest.fixture(scope="session")
def quadratic_drift():
    return sc.DriftSpec.quadratic(1.0)


@pytest.fixture(scope="session")
def quadratic_constants(quadratic_drift, arctan_ic):
    hyp = sc.check_hypotheses(quadratic_drift, arctan_ic, sc.Window(-2.0, 2.0, 401), 1.0)
    return sc.constants(hyp, 1.0, 1.0)


def path_with_terminal(grid: sc.TimeGrid, b_total: float) -> sc.BrownianPath:
    """Deterministic path with B(horizon) == b_total (linear ramp)."""
    inc = np.full(grid.n_steps, b_total / grid.n_steps)
    return sc.BrownianPath(grid, inc)
