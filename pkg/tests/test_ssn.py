"""Newton driver behavior: the two initial-state builders, single steps,
full solves on the committed 16x16 instance, and the report bookkeeping."""

import io
import re

import numpy as np
import pytest

from instances import LAMBDA_FAR, committed16, manufactured
from tvlearn.grid import GridSpec, ScalarField
from tvlearn.huber import HuberParams
from tvlearn.ssn import (
    SsnConfig,
    SsnReport,
    consistent_initial_state,
    default_initial_state,
    newton_step,
    ssn_solve,
    superlinearity_check,
)
from tvlearn.system import (
    ModelParams,
    OptState,
    ProblemData,
    assemble_jacobian,
    complementarity_residual,
    multiplier,
    residual,
)


def test_config_rejects_bad_values():
    with pytest.raises(ValueError):
        SsnConfig(mode="gauss")
    with pytest.raises(ValueError):
        SsnConfig(tol=0.0)
    with pytest.raises(ValueError):
        SsnConfig(step_tol=-1.0)
    with pytest.raises(ValueError):
        SsnConfig(max_iter=0)


def test_default_initial_state_closes_dual_rows():
    """u = f with q = h(Df) and zero adjoint makes rows 2 and 4 vanish
    exactly, not just to roundoff."""
    grid, data, clean, params = committed16(25.0)
    y0 = default_initial_state(data, params, SsnConfig(lambda_init=0.7))
    assert np.array_equal(y0.u[0].values, data.f[0].values)
    assert np.all(y0.p[0].values == 0.0)
    assert np.all(y0.z[0].comp1 == 0.0) and np.all(y0.z[0].comp2 == 0.0)
    assert np.all(y0.lam.values == 0.7)
    res = residual(y0, data, params)
    assert np.all(res.q[0].comp1 == 0.0) and np.all(res.q[0].comp2 == 0.0)
    assert np.all(res.z[0].comp1 == 0.0) and np.all(res.z[0].comp2 == 0.0)


def test_default_initial_state_first_step_collapses_weight():
    """With u = f the weight couplings in the multiplier row vanish, so the
    first Newton direction cancels the entire constant weight. This is the
    reason the far-start runs go through consistent_initial_state."""
    grid, data, clean, params = committed16(25.0)
    cfg = SsnConfig(lambda_init=0.7)
    y0 = default_initial_state(data, params, cfg)
    dy, rn = newton_step(y0, data, params, cfg)
    assert rn > 0.0
    assert np.allclose(dy.lam.values, -0.7, atol=1e-6)


def test_consistent_initial_state_closes_first_four_rows():
    grid, data, clean, params = committed16(25.0)
    y0 = consistent_initial_state(data, params, 2.0)
    assert np.all(y0.lam.values == 2.0)
    res = residual(y0, data, params)
    assert np.abs(res.u[0].values).max() <= 1e-7
    assert np.abs(res.p[0].values).max() <= 1e-7
    for vf in (res.q[0], res.z[0]):
        assert max(np.abs(vf.comp1).max(), np.abs(vf.comp2).max()) <= 1e-7
    # only the multiplier row is allowed to stay far from zero
    assert np.abs(res.lam.values).max() > 1e-8


def test_newton_step_zero_residual_returns_zero_direction():
    grid = GridSpec(8, 8, 0.125)
    params = ModelParams(mu=1e-3, beta=1e-2, huber=HuberParams(5.0), n_train=1)
    data = ProblemData(f=[ScalarField.zeros(grid)], u_dag=[ScalarField.zeros(grid)])
    y = OptState.zeros(grid, 1)
    dy, rn = newton_step(y, data, params, SsnConfig())
    assert rn == 0.0
    assert np.all(dy.flat() == 0.0)


def test_newton_direction_solves_linear_system():
    """The returned direction satisfies J d = -F against the assembled
    matrix to the advertised 1e-8 relative accuracy, in both modes."""
    grid, data, clean, params = committed16(25.0)
    y = consistent_initial_state(data, params, 2.0)
    vec = residual(y, data, params).flat()
    rn0 = float(np.linalg.norm(vec))
    for mode in ("exact", "projected"):
        dy, rn = newton_step(y, data, params, SsnConfig(mode=mode))
        assert rn == pytest.approx(rn0, rel=1e-14)
        jac = assemble_jacobian(y, data, params, mode)
        lin = jac @ dy.flat() + vec
        assert np.linalg.norm(lin) <= 2e-8 * rn0


def test_committed_run_converges(newton16_gamma25):
    grid, data, params, y, report = newton16_gamma25
    assert report.converged
    assert report.iterations >= 4
    assert report.residual_history[-1] <= 1e-8
    print(
        f"gamma 25 far start: {report.iterations} iterations, "
        f"final residual {report.residual_history[-1]:.3e}"
    )


def test_report_bookkeeping(newton16_gamma25):
    _, _, _, _, report = newton16_gamma25
    assert len(report.residual_history) == report.iterations + 1
    assert len(report.step_history) == report.iterations
    assert len(report.active_sizes) == report.iterations
    assert all(r > 0.0 for r in report.residual_history)
    assert all(s > 0.0 for s in report.step_history)
    assert all(int(a) >= 0 for a in report.active_sizes)


def test_committed_run_tail_contraction(newton16_gamma25):
    """Residual ratios shrink monotonically over the last steps, the
    hallmark of a superlinear tail."""
    _, _, _, _, report = newton16_gamma25
    hist = report.residual_history
    ratios = [hist[i + 1] / hist[i] for i in range(len(hist) - 1)]
    assert ratios[-3] > ratios[-2] > ratios[-1]
    assert ratios[-1] < 0.5


def test_committed_solution_feasible(newton16_gamma25):
    _, data, params, y, _ = newton16_gamma25
    assert y.lam.values.min() >= -1e-8
    theta = multiplier(y, data, params)
    assert complementarity_residual(y.lam, theta) <= 1e-6


def test_superlinearity_value_on_committed_run(newton16_gamma25):
    _, _, _, _, report = newton16_gamma25
    hist = report.residual_history
    val = superlinearity_check(report)
    assert val == pytest.approx(hist[-1] / hist[-2], rel=1e-15)
    assert val < 0.5


def test_far_start_projected_converges_at_high_sharpness(newton16_gamma100):
    grid, data, params, y, report, exact_outcome = newton16_gamma100
    assert report.converged
    assert y.lam.values.min() >= -1e-8
    assert isinstance(exact_outcome, str) and exact_outcome
    print(f"exact mode from the same start: {exact_outcome}")


def test_superlinearity_check_geometric_history():
    rep = SsnReport(iterations=3, residual_history=[1.0, 0.1, 1e-3, 1e-6])
    assert superlinearity_check(rep) == pytest.approx(1e-3)


def test_superlinearity_check_exact_zero_tail():
    rep = SsnReport(iterations=3, residual_history=[1.0, 1e-2, 0.0, 0.0])
    assert superlinearity_check(rep) == 0.0


def test_superlinearity_check_short_history():
    rep = SsnReport(iterations=2, residual_history=[1.0, 0.5, 0.25])
    with pytest.raises(ValueError):
        superlinearity_check(rep)


def test_manufactured_start_needs_at_most_one_iteration():
    y_star, data, params = manufactured()
    y, report = ssn_solve(y_star, data, params, SsnConfig())
    assert report.converged
    assert report.iterations <= 1
    assert report.residual_history[0] <= 1e-10


def test_solver_is_deterministic(newton16_gamma25):
    """Rebuilding the instance from scratch and rerunning reproduces the
    fixture result bit for bit."""
    _, _, _, y_ref, rep_ref = newton16_gamma25
    grid, data, clean, params = committed16(25.0)
    y0 = consistent_initial_state(data, params, LAMBDA_FAR)
    y, rep = ssn_solve(y0, data, params, SsnConfig(mode="projected", max_iter=60))
    assert np.array_equal(y.flat(), y_ref.flat())
    assert rep.residual_history == rep_ref.residual_history
    assert rep.step_history == rep_ref.step_history


def test_step_tolerance_stops_without_convergence():
    """A huge step tolerance halts the loop after one update, and that exit
    does not count as convergence."""
    grid, data, clean, params = committed16(25.0)
    y0 = consistent_initial_state(data, params, LAMBDA_FAR)
    cfg = SsnConfig(mode="projected", step_tol=1e9, max_iter=10)
    y, report = ssn_solve(y0, data, params, cfg)
    assert report.iterations == 1
    assert not report.converged


def test_log_stream_line_format():
    grid, data, clean, params = committed16(25.0)
    y0 = consistent_initial_state(data, params, LAMBDA_FAR)
    buf = io.StringIO()
    cfg = SsnConfig(mode="projected", max_iter=2, log_stream=buf)
    ssn_solve(y0, data, params, cfg)
    lines = buf.getvalue().strip().splitlines()
    assert len(lines) == 2
    pat = re.compile(
        r"^iter +(\d+) residual \d\.\d{6}e[+-]\d{2,3} "
        r"step \d\.\d{6}e[+-]\d{2,3} active +\d+$"
    )
    for expect, line in enumerate(lines, start=1):
        m = pat.match(line)
        assert m is not None, line
        assert int(m.group(1)) == expect
