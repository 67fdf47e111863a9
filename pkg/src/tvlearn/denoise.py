"""Lower-level TV denoising with a fixed weight field.

This is the deployment path: once a weight field has been learned it can be
applied to any image of the same shape, and it doubles as the forward solver
for parameter sweeps with constant weights.
"""

from __future__ import annotations

import numpy as np

from .grid import ScalarField
from .system import ModelParams, solve_state


def tv_denoise(f: ScalarField, lam, params: ModelParams) -> ScalarField:
    """Denoise f with fidelity weight lam (a ScalarField or a constant).

    Negative weight values are clamped to zero nodewise before solving.
    Solver failures propagate as SolverError.
    """
    if isinstance(lam, ScalarField):
        lam_field = ScalarField(f.grid, np.maximum(lam.values, 0.0))
    else:
        lam_field = ScalarField.full(f.grid, max(float(lam), 0.0))
    u, _ = solve_state(lam_field, f, params)
    return u
