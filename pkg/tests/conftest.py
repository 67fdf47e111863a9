import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))


@pytest.fixture(scope="session")
def newton16_gamma25():
    """Converged projected-mode run on the committed instance at gamma 25."""
    from instances import LAMBDA_FAR, committed16
    from tvlearn.ssn import SsnConfig, consistent_initial_state, ssn_solve

    grid, data, clean, params = committed16(25.0)
    y0 = consistent_initial_state(data, params, LAMBDA_FAR)
    y, report = ssn_solve(y0, data, params, SsnConfig(mode="projected", max_iter=60))
    return grid, data, params, y, report


@pytest.fixture(scope="session")
def newton16_gamma100():
    """Projected run at gamma 100 from the far start, plus the exact-mode
    outcome from the same point (recorded, not required to fail)."""
    from instances import LAMBDA_FAR, committed16
    from tvlearn import SolverError
    from tvlearn.ssn import SsnConfig, consistent_initial_state, ssn_solve

    grid, data, clean, params = committed16(100.0)
    y0 = consistent_initial_state(data, params, LAMBDA_FAR)
    y, report = ssn_solve(
        y0.copy(), data, params, SsnConfig(mode="projected", max_iter=60)
    )
    try:
        _, exact_report = ssn_solve(
            y0.copy(), data, params, SsnConfig(mode="exact", max_iter=60)
        )
        exact_outcome = (
            f"converged={exact_report.converged} after {exact_report.iterations} iterations"
        )
    except SolverError as err:
        exact_outcome = f"solver error: {err}"
    return grid, data, params, y, report, exact_outcome
