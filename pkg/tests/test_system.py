"""Optimality-system assembly tests: residual rows, active set, derivative
application, and the reduced solvers behind the weight-to-image map."""

import numpy as np
import pytest

from instances import committed16, manufactured
from tvlearn import huber
from tvlearn.grid import GridSpec, ScalarField, VectorField, gradient
from tvlearn.huber import HuberParams
from tvlearn.ssn import SsnConfig, consistent_initial_state, newton_step, ssn_solve
from tvlearn.system import (
    ModelParams,
    OptState,
    ProblemData,
    active_set,
    assemble_jacobian,
    complementarity_residual,
    generalized_derivative_apply,
    multiplier,
    residual,
    solve_linearized_state,
    solve_second_derivative,
    solve_state,
    state_operator,
)


def random_state(grid, n_train, rng, lam_lo=0.2, lam_hi=2.0):
    def sf():
        return ScalarField(grid, rng.uniform(-0.5, 1.5, grid.shape))

    def vf():
        return VectorField(
            grid,
            rng.uniform(-0.8, 0.8, (grid.m - 1, grid.l)),
            rng.uniform(-0.8, 0.8, (grid.m, grid.l - 1)),
        )

    y = OptState(
        [sf() for _ in range(n_train)],
        [vf() for _ in range(n_train)],
        [sf() for _ in range(n_train)],
        [vf() for _ in range(n_train)],
        ScalarField(grid, rng.uniform(lam_lo, lam_hi, grid.shape)),
    )
    data = ProblemData(
        [ScalarField(grid, rng.uniform(0, 1, grid.shape)) for _ in range(n_train)],
        [ScalarField(grid, rng.uniform(0, 1, grid.shape)) for _ in range(n_train)],
    )
    return y, data


def dense_neumann_laplacian_apply(vals, h):
    """Five-point Laplacian with mirrored ghosts (ghost row equals the first
    interior row), matching the reflecting boundary convention."""
    m, l = vals.shape
    out = np.zeros_like(vals)
    for i in range(m):
        for j in range(l):
            c = 0.0
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ii, jj = i + di, j + dj
                if not (0 <= ii < m and 0 <= jj < l):
                    ii, jj = i - di, j - dj
                c += vals[ii, jj] - vals[i, j]
            out[i, j] = c / h**2
    return out


def test_residual_row5_loop_oracle():
    rng = np.random.default_rng(3)
    g = GridSpec(5, 4, 0.7)
    mp = ModelParams(mu=1e-3, beta=0.01, huber=HuberParams(4.0), n_train=2)
    y, data = random_state(g, 2, rng)
    res = residual(y, data, mp)
    coupling = np.zeros(g.shape)
    for k in range(2):
        coupling += (y.u[k].values - data.f[k].values) * y.p[k].values
    t = -mp.beta * dense_neumann_laplacian_apply(y.lam.values, g.h) + coupling
    want = t + mp.beta * y.lam.values - np.maximum(0.0, t)
    assert np.allclose(res.lam.values, want, atol=1e-12)


def test_multiplier_loop_oracle():
    rng = np.random.default_rng(5)
    g = GridSpec(6, 6, 0.5)
    mp = ModelParams(mu=1e-3, beta=0.02, huber=HuberParams(4.0), n_train=1)
    y, data = random_state(g, 1, rng)
    th = multiplier(y, data, mp)
    want = (
        -mp.beta * dense_neumann_laplacian_apply(y.lam.values, g.h)
        + mp.beta * y.lam.values
        + (y.u[0].values - data.f[0].values) * y.p[0].values
    )
    assert np.allclose(th.values, want, atol=1e-13)


def test_residual_shape_and_pair_count():
    rng = np.random.default_rng(7)
    g = GridSpec(6, 5, 1.0)
    mp = ModelParams(mu=1e-3, beta=0.01, huber=HuberParams(2.0), n_train=3)
    y, data = random_state(g, 3, rng)
    res = residual(y, data, mp)
    assert res.n_train == 3
    assert res.lam.grid.shape == (6, 5)
    mp_bad = ModelParams(mu=1e-3, beta=0.01, huber=HuberParams(2.0), n_train=2)
    with pytest.raises(ValueError):
        residual(y, data, mp_bad)


def test_manufactured_residual_tiny():
    y, data, params = manufactured()
    res = residual(y, data, params)
    assert res.norm() <= 1e-10
    assert np.abs(res.q[0].comp1).max() == 0.0
    assert np.abs(res.q[0].comp2).max() == 0.0
    assert np.abs(res.z[0].comp1).max() == 0.0
    assert np.abs(res.z[0].comp2).max() == 0.0


def test_manufactured_bound_inactive():
    y, data, params = manufactured()
    assert active_set(y, data, params).n_active == 0
    comp = complementarity_residual(y.lam, multiplier(y, data, params))
    assert comp <= 1e-12


def test_manufactured_newton_contraction():
    y, data, params = manufactured()
    rng = np.random.default_rng(5)
    yp = y.copy()
    yp.u[0].values[:] += 1e-6 * rng.standard_normal(y.grid.shape)
    yp.lam.values[:] += 1e-6 * rng.standard_normal(y.grid.shape)
    yp.p[0].values[:] += 1e-10 * rng.standard_normal(y.grid.shape)
    yp.q[0].comp1[:] += 1e-8 * rng.standard_normal(yp.q[0].comp1.shape)
    yp.q[0].comp2[:] += 1e-8 * rng.standard_normal(yp.q[0].comp2.shape)
    d0 = np.linalg.norm(yp.flat() - y.flat())
    dy, rn = newton_step(yp, data, params, SsnConfig(mode="exact"))
    d1 = np.linalg.norm(yp.flat() + dy.flat() - y.flat())
    assert d1 < 1e-3 * d0


def test_active_set_ties_inactive():
    g = GridSpec(6, 6, 1.0)
    mp = ModelParams(mu=1e-3, beta=0.01, huber=HuberParams(2.0), n_train=1)
    y = OptState.zeros(g, 1)
    y.lam.values[:] = 0.7
    data = ProblemData([ScalarField.full(g, 0.3)], [ScalarField.full(g, 0.3)])
    mask = active_set(y, data, mp)
    assert mask.n_active == 0


def test_active_set_sign_pattern():
    g = GridSpec(6, 6, 1.0)
    mp = ModelParams(mu=1e-3, beta=0.01, huber=HuberParams(2.0), n_train=1)
    y = OptState.zeros(g, 1)
    y.u[0].values[:] = 1.0
    y.p[0].values[:] = 0.0
    y.p[0].values[2, 3] = 5.0
    y.p[0].values[4, 1] = -5.0
    data = ProblemData([ScalarField.zeros(g)], [ScalarField.zeros(g)])
    mask = active_set(y, data, mp)
    want = np.zeros((6, 6), dtype=bool)
    want[2, 3] = True
    assert np.array_equal(mask.values, want)


def test_complementarity_examples():
    g = GridSpec(4, 4, 1.0)
    lam = ScalarField.zeros(g)
    th = ScalarField.zeros(g)
    lam.values[0, 0] = 1.0
    th.values[1, 1] = 2.0
    assert complementarity_residual(lam, th) == 0.0
    lam.values[2, 2] = -1e-3
    assert complementarity_residual(lam, th) == pytest.approx(1e-3)
    lam.values[2, 2] = 0.0
    lam.values[1, 1] = 0.15
    assert complementarity_residual(lam, th) == pytest.approx(0.3)


def stable_direction(y, data, params, rng, t):
    """Random direction filtered for branch stability under +-t steps.

    Entries of the dual-row comparison are dropped where the regularizer
    region of D(u +- t du) differs from the region at Du, and the lam row is
    only compared when the active set is unchanged.
    """
    dy = OptState.from_flat(y.grid, y.n_train, rng.standard_normal(y.flat().size))
    masks = []
    for sign in (1.0, -1.0):
        ys = OptState.from_flat(y.grid, y.n_train, y.flat() + sign * t * dy.flat())
        masks.append(active_set(ys, data, params).values)
    mask0 = active_set(y, data, params).values
    lam_ok = np.array_equal(masks[0], mask0) and np.array_equal(masks[1], mask0)

    edge_ok = []
    for k in range(y.n_train):
        du0 = huber.pair_components(gradient(y.u[k]))
        g0 = params.huber.gamma * np.linalg.norm(du0, axis=-1)
        ok = np.ones(y.grid.shape, dtype=bool)
        for sign in (1.0, -1.0):
            us = ScalarField(y.grid, y.u[k].values + sign * t * dy.u[k].values)
            dus = huber.pair_components(gradient(us))
            gs = params.huber.gamma * np.linalg.norm(dus, axis=-1)
            for thr in (params.huber.a, params.huber.b):
                ok &= (g0 < thr) == (gs < thr)
        edge_ok.append(ok)
    return dy, lam_ok, edge_ok


def test_generalized_derivative_matches_fd():
    rng = np.random.default_rng(11)
    grid, data, clean, params = committed16(25.0)
    y = consistent_initial_state(data, params, 1.0)
    t = 1e-7
    checked = 0
    for _ in range(8):
        dy, lam_ok, edge_ok = stable_direction(y, data, params, rng, t)
        jv = generalized_derivative_apply(y, dy, data, params, mode="exact")
        rp = residual(
            OptState.from_flat(grid, 1, y.flat() + t * dy.flat()), data, params
        )
        rm = residual(
            OptState.from_flat(grid, 1, y.flat() - t * dy.flat()), data, params
        )
        fd = (rp.flat() - rm.flat()) / (2 * t)
        jvf = jv.flat()
        scale = np.linalg.norm(jvf) + 1.0
        fd_state = OptState.from_flat(grid, 1, fd)
        err_u = np.abs(fd_state.u[0].values - jv.u[0].values).max()
        err_p = np.abs(fd_state.p[0].values - jv.p[0].values).max()
        ok = edge_ok[0]
        err_q = max(
            np.abs((fd_state.q[0].comp1 - jv.q[0].comp1) * ok[:-1, :]).max(),
            np.abs((fd_state.q[0].comp2 - jv.q[0].comp2) * ok[:, :-1]).max(),
        )
        err_z = max(
            np.abs((fd_state.z[0].comp1 - jv.z[0].comp1) * ok[:-1, :]).max(),
            np.abs((fd_state.z[0].comp2 - jv.z[0].comp2) * ok[:, :-1]).max(),
        )
        assert err_u <= 1e-5 * scale
        assert err_p <= 1e-5 * scale
        assert err_q <= 1e-4 * scale
        assert err_z <= 1e-4 * scale
        if lam_ok:
            err_lam = np.abs(fd_state.lam.values - jv.lam.values).max()
            assert err_lam <= 1e-5 * scale
            checked += 1
    assert checked >= 4


def test_jacobian_matrix_matches_apply():
    rng = np.random.default_rng(13)
    g = GridSpec(7, 6, 0.4)
    mp = ModelParams(mu=1e-4, beta=0.01, huber=HuberParams(5.0), n_train=2)
    y, data = random_state(g, 2, rng)
    for mode in ("exact", "projected"):
        jac = assemble_jacobian(y, data, mp, mode=mode)
        for _ in range(4):
            dy = OptState.from_flat(g, 2, rng.standard_normal(y.flat().size))
            want = generalized_derivative_apply(y, dy, data, mp, mode=mode).flat()
            got = jac @ dy.flat()
            assert np.allclose(got, want, atol=1e-11 * (1 + np.abs(want).max()))


def test_projected_equals_exact_on_feasible_dual():
    """With q stored as h(Du), the projected rows coincide with the exact ones."""
    rng = np.random.default_rng(17)
    grid, data, clean, params = committed16(25.0)
    y = consistent_initial_state(data, params, 1.0)
    dy = OptState.from_flat(grid, 1, rng.standard_normal(y.flat().size))
    a = generalized_derivative_apply(y, dy, data, params, mode="exact")
    b = generalized_derivative_apply(y, dy, data, params, mode="projected")
    assert np.allclose(a.flat(), b.flat(), atol=1e-10 * (1 + np.abs(a.flat()).max()))


def test_solve_state_closes_rows():
    grid, data, clean, params = committed16(25.0)
    lam = ScalarField.full(grid, 1.5)
    u, q = solve_state(lam, data.f[0], params)
    y = OptState.zeros(grid, 1)
    y.u[0] = u
    y.q[0] = q
    y.lam = lam
    res = residual(y, data, params)
    r1 = np.abs(res.u[0].values).max()
    r2 = max(np.abs(res.q[0].comp1).max(), np.abs(res.q[0].comp2).max())
    assert r1 <= 1e-8
    assert r2 <= 1e-8


def test_solve_state_clamps_negative_weight():
    grid, data, clean, params = committed16(25.0)
    lam = ScalarField.full(grid, 1.0)
    lam.values[3, 3] = -0.5
    lam_clamped = ScalarField(grid, np.maximum(lam.values, 0.0))
    u1, _ = solve_state(lam, data.f[0], params)
    u2, _ = solve_state(lam_clamped, data.f[0], params)
    assert np.array_equal(u1.values, u2.values)


def test_linearized_state_satisfies_equation():
    rng = np.random.default_rng(19)
    grid, data, clean, params = committed16(25.0)
    lam = ScalarField(grid, 1.0 + 0.5 * rng.uniform(0, 1, grid.shape))
    u, _ = solve_state(lam, data.f[0], params)
    xi = ScalarField(grid, rng.standard_normal(grid.shape))
    z = solve_linearized_state(lam, u, data.f[0], xi, params)
    op = state_operator(lam, u, params)
    lhs = op @ z.flat()
    rhs = (-2.0 * xi.values * (u.values - data.f[0].values)).ravel(order="F")
    assert np.linalg.norm(lhs - rhs) <= 1e-9 * (1 + np.linalg.norm(rhs))


def test_fd_slope_of_state_derivative():
    grid, data, clean, params = committed16(25.0)
    lam = ScalarField.full(grid, 2.0)
    u, _ = solve_state(lam, data.f[0], params, tol=1e-12)
    rng = np.random.default_rng(23)
    xi = ScalarField(grid, rng.uniform(-1, 1, grid.shape))
    z = solve_linearized_state(lam, u, data.f[0], xi, params)
    ts = [1e-2, 1e-3, 1e-4]
    errs = []
    for t in ts:
        lam_t = ScalarField(grid, lam.values + t * xi.values)
        u_t, _ = solve_state(lam_t, data.f[0], params, tol=1e-12)
        fd = (u_t.values - u.values) / t
        errs.append(np.linalg.norm(fd - z.values))
    slopes = np.diff(np.log(errs)) / np.diff(np.log(ts))
    assert min(slopes) >= 0.9


def test_second_derivative_symmetric():
    grid, data, clean, params = committed16(25.0)
    lam = ScalarField.full(grid, 2.0)
    u, _ = solve_state(lam, data.f[0], params, tol=1e-12)
    rng = np.random.default_rng(29)
    xi = ScalarField(grid, rng.uniform(-1, 1, grid.shape))
    zeta = ScalarField(grid, rng.uniform(-1, 1, grid.shape))
    w_xz = solve_second_derivative(lam, u, data.f[0], xi, zeta, params)
    w_zx = solve_second_derivative(lam, u, data.f[0], zeta, xi, params)
    assert np.abs(w_xz.values - w_zx.values).max() <= 1e-10


def test_state_operator_spd_at_positive_weight():
    grid, data, clean, params = committed16(25.0)
    lam = ScalarField.full(grid, 1.0)
    u, _ = solve_state(lam, data.f[0], params)
    op = state_operator(lam, u, params).toarray()
    assert np.abs(op - op.T).max() <= 1e-11 * np.abs(op).max()
    w = np.linalg.eigvalsh(0.5 * (op + op.T))
    assert w.min() > 0
