"""Committed synthetic instances shared across the test suite.

Everything here is deterministic: fixed seed, fixed geometry, fixed model
weights. The recorded convergence behavior in the Newton and acceptance
tests depends on these exact values, so treat them as frozen.
"""

import numpy as np

from tvlearn import huber
from tvlearn.data import NoiseSpec, add_noise
from tvlearn.grid import GridSpec, ScalarField, divergence, gradient, laplacian
from tvlearn.huber import HuberParams
from tvlearn.system import ModelParams, OptState, ProblemData

SEED = 123

# Far constant start for the globalization comparison at gamma 100. At this
# grid spacing the stationary weight sits around 8-12, so 0.5 is well outside
# any local neighbourhood of it.
LAMBDA_FAR = 0.5


def checker(grid, cell=3, lo=0.25, hi=0.75):
    i, j = np.meshgrid(np.arange(grid.m), np.arange(grid.l), indexing="ij")
    vals = np.where(((i // cell) + (j // cell)) % 2 == 0, lo, hi)
    return ScalarField(grid, vals.astype(float))


def committed16(gamma=25.0):
    """16x16 checkerboard training pair; run at gamma 25 and gamma 100."""
    grid = GridSpec(16, 16, 1.0 / 16)
    clean = checker(grid)
    noisy = add_noise(clean, NoiseSpec(0.05, SEED))
    data = ProblemData([noisy], [clean])
    params = ModelParams(mu=1e-10, beta=1e-6, huber=HuberParams(gamma), n_train=1)
    return grid, data, clean, params


def manufactured(gamma=25.0, mu=1e-10, beta=1e-6):
    """Exact stationary point built backwards from smooth fields.

    u is a shallow concave paraboloid whose gradient stays inside the linear
    regularizer branch, lam is identically one, and q and z close the two
    dual rows by definition. f and u_dag are then chosen so the primal and
    adjoint rows cancel exactly in floating point, and p = -beta/(u - f)
    makes the complementarity row vanish with the bound inactive everywhere.
    """
    grid = GridSpec(16, 16, 1.0 / 16)
    hp = HuberParams(gamma)
    params = ModelParams(mu=mu, beta=beta, huber=hp, n_train=1)
    x1, x2 = np.meshgrid(
        np.arange(grid.m) * grid.h, np.arange(grid.l) * grid.h, indexing="ij"
    )
    u = ScalarField(grid, 0.55 - 0.02 * ((x1 - 0.5) ** 2 + (x2 - 0.5) ** 2))
    du = gradient(u)
    lam = ScalarField(grid, np.ones(grid.shape))
    q = huber.field_value(du, hp)
    f = ScalarField(
        grid, u.values + (-mu * laplacian(u).values - divergence(q).values) / 2.0
    )
    p = ScalarField(grid, -beta / (u.values - f.values))
    z = huber.field_prime_apply(du, gradient(p), hp)
    u_dag = ScalarField(
        grid,
        u.values
        + (
            -mu * laplacian(p).values
            - divergence(z).values
            + 2 * lam.values * p.values
        )
        / 2.0,
    )
    y = OptState([u], [q], [p], [z], lam)
    return y, ProblemData([f], [u_dag]), params
