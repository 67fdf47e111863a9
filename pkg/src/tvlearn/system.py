"""Discrete optimality system coupling N denoising pairs through one weight.

State y = (u_k, q_k, p_k, z_k for k = 1..N, and the shared weight field
lam).  The residual rows per pair are the primal equation, the dual
constraint q = h(Du), the adjoint equation, and its dual constraint
z = h'(Du) Dp; the shared final row is the nonsmooth projection equation
for lam that encodes lam >= 0 against its multiplier.

Flat vectors concatenate, per pair, [u, q1, q2, p, z1, z2], followed by the
single lam block; every scalar block uses the grid's (i, j) -> i + j*m
layout and staggered blocks the analogous column-major order.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SolverError
from .grid import (
    BoundaryKind,
    GridSpec,
    ScalarField,
    VectorField,
    check_same_grid,
    divergence,
    gradient,
    laplacian,
)
from . import huber
from .huber import HuberParams


@dataclass(frozen=True)
class ModelParams:
    """Weights of the learning problem: elliptic mu >= 0, penalty beta > 0,
    the regularizer parameters, and the number of training pairs."""

    mu: float
    beta: float
    huber: HuberParams
    n_train: int = 1

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError(f"mu must be nonnegative, got {self.mu}")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if self.n_train < 1:
            raise ValueError(f"need at least one training pair, got {self.n_train}")


@dataclass
class OptState:
    """Full unknown of the optimality system: per-pair (u, q, p, z) plus the
    shared nonnegative weight field ``lam``."""

    u: list
    q: list
    p: list
    z: list
    lam: ScalarField

    def __post_init__(self):
        n = len(self.u)
        if not (len(self.q) == len(self.p) == len(self.z) == n):
            raise ValueError("per-pair field lists must have equal length")
        check_same_grid(self.lam, *self.u, *self.q, *self.p, *self.z)

    @property
    def grid(self) -> GridSpec:
        return self.lam.grid

    @property
    def n_train(self) -> int:
        return len(self.u)

    @classmethod
    def zeros(cls, grid: GridSpec, n_train: int) -> "OptState":
        return cls(
            u=[ScalarField.zeros(grid) for _ in range(n_train)],
            q=[VectorField.zeros(grid) for _ in range(n_train)],
            p=[ScalarField.zeros(grid) for _ in range(n_train)],
            z=[VectorField.zeros(grid) for _ in range(n_train)],
            lam=ScalarField.zeros(grid),
        )

    def copy(self) -> "OptState":
        return OptState(
            [f.copy() for f in self.u],
            [f.copy() for f in self.q],
            [f.copy() for f in self.p],
            [f.copy() for f in self.z],
            self.lam.copy(),
        )

    def flat(self) -> np.ndarray:
        parts = []
        for k in range(self.n_train):
            parts.extend([self.u[k].flat(), self.q[k].flat(), self.p[k].flat(), self.z[k].flat()])
        parts.append(self.lam.flat())
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, grid: GridSpec, n_train: int, vec: np.ndarray) -> "OptState":
        m, l = grid.shape
        nu = m * l
        ns = (m - 1) * l + m * (l - 1)
        vec = np.asarray(vec, dtype=float)
        if vec.size != n_train * (2 * nu + 2 * ns) + nu:
            raise ValueError(
                f"flat state has {vec.size} entries, expected {n_train * (2 * nu + 2 * ns) + nu}"
            )
        u, q, p, z = [], [], [], []
        at = 0
        for _ in range(n_train):
            u.append(ScalarField.from_flat(grid, vec[at : at + nu])); at += nu
            q.append(VectorField.from_flat(grid, vec[at : at + ns])); at += ns
            p.append(ScalarField.from_flat(grid, vec[at : at + nu])); at += nu
            z.append(VectorField.from_flat(grid, vec[at : at + ns])); at += ns
        return cls(u, q, p, z, ScalarField.from_flat(grid, vec[at:]))

    def norm(self) -> float:
        return float(np.linalg.norm(self.flat()))


@dataclass
class ProblemData:
    """Training pairs: noisy inputs f and their clean references u_dag.

    Image data is expected in the [0, 1] intensity range (the loaders
    normalize); synthetic diagnostics may exceed it.
    """

    f: list
    u_dag: list

    def __post_init__(self):
        if len(self.f) != len(self.u_dag):
            raise ValueError("f and u_dag lists must have equal length")
        check_same_grid(*self.f, *self.u_dag)

    @property
    def grid(self) -> GridSpec:
        return self.f[0].grid

    @property
    def n_train(self) -> int:
        return len(self.f)


@dataclass
class ActiveMask:
    """Nodes where the nonsmooth row currently selects the bound lam = 0."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=bool)
        if self.values.shape != self.grid.shape:
            raise ValueError(f"mask shape {self.values.shape} != grid {self.grid.shape}")

    @property
    def n_active(self) -> int:
        return int(self.values.sum())

    def flat_values(self) -> np.ndarray:
        return self.values.ravel(order="F")


def _check_compat(y: OptState, data: ProblemData, params: ModelParams):
    if y.n_train != params.n_train or data.n_train != params.n_train:
        raise ValueError(
            f"pair-count mismatch: state {y.n_train}, data {data.n_train}, "
            f"params {params.n_train}"
        )
    check_same_grid(y.lam, data.f[0])


# ---------------------------------------------------------------------------
# Sparse operator cache per grid.


@lru_cache(maxsize=16)
def _operators(grid: GridSpec):
    """CSR matrices for the flat layout: gradient (stacked components),
    Neumann five-point Laplacian, and identities."""
    m, l = grid.shape
    h = grid.h

    def lap1d(n: int) -> sp.csr_matrix:
        t = sp.diags([np.ones(n - 1), -2.0 * np.ones(n), np.ones(n - 1)], [-1, 0, 1]).tolil()
        t[0, 1] = 2.0
        t[n - 1, n - 2] = 2.0
        return t.tocsr()

    lap = (sp.kron(sp.eye(l), lap1d(m)) + sp.kron(lap1d(l), sp.eye(m))) / h**2

    # Forward differences; rows follow the staggered column-major layouts.
    i, j = np.meshgrid(np.arange(m - 1), np.arange(l), indexing="ij")
    rows = (i + j * (m - 1)).ravel(order="F")
    c_hi = ((i + 1) + j * m).ravel(order="F")
    c_lo = (i + j * m).ravel(order="F")
    g1 = sp.coo_matrix(
        (
            np.concatenate([np.full(rows.size, 1 / h), np.full(rows.size, -1 / h)]),
            (np.concatenate([rows, rows]), np.concatenate([c_hi, c_lo])),
        ),
        shape=((m - 1) * l, m * l),
    ).tocsr()

    i, j = np.meshgrid(np.arange(m), np.arange(l - 1), indexing="ij")
    rows = (i + j * m).ravel(order="F")
    c_hi = (i + (j + 1) * m).ravel(order="F")
    c_lo = (i + j * m).ravel(order="F")
    g2 = sp.coo_matrix(
        (
            np.concatenate([np.full(rows.size, 1 / h), np.full(rows.size, -1 / h)]),
            (np.concatenate([rows, rows]), np.concatenate([c_hi, c_lo])),
        ),
        shape=(m * (l - 1), m * l),
    ).tocsr()

    grad = sp.vstack([g1, g2]).tocsr()
    return {"lap": lap.tocsr(), "grad": grad, "g1": g1, "g2": g2}


def staggered_matrix(grid: GridSpec, mats: np.ndarray) -> sp.csr_matrix:
    """Assemble the block-pointwise operator on staggered vectors from per-node
    2x2 matrices ``mats`` of shape (m, l, 2, 2).

    At nodes where only one component exists (last row for component 1, last
    column for component 2) only the corresponding diagonal entry is used.
    """
    m, l = grid.shape
    s1 = (m - 1) * l
    i, j = np.meshgrid(np.arange(m), np.arange(l), indexing="ij")
    idx1 = i + j * (m - 1)          # valid where i < m-1
    idx2 = s1 + i + j * m           # valid where j < l-1
    has1 = i < m - 1
    has2 = j < l - 1
    both = has1 & has2

    rows = np.concatenate(
        [idx1[has1], idx2[has2], idx1[both], idx2[both]]
    )
    cols = np.concatenate(
        [idx1[has1], idx2[has2], idx2[both], idx1[both]]
    )
    vals = np.concatenate(
        [mats[..., 0, 0][has1], mats[..., 1, 1][has2], mats[..., 0, 1][both], mats[..., 1, 0][both]]
    )
    n = s1 + m * (l - 1)
    return sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


# ---------------------------------------------------------------------------
# Residual, multiplier, active set.


def _coupling(y: OptState, data: ProblemData) -> np.ndarray:
    """Sum over pairs of (u_k - f_k) p_k, nodewise."""
    acc = np.zeros(y.grid.shape)
    for k in range(y.n_train):
        acc += (y.u[k].values - data.f[k].values) * y.p[k].values
    return acc


def residual(y: OptState, data: ProblemData, params: ModelParams) -> OptState:
    """Nonlinear residual of the optimality system, stored state-shaped.

    Per pair: the primal equation, the dual constraint q - h(Du), the
    adjoint equation, and z - h'(Du)Dp; the lam slot carries the nonsmooth
    complementarity row.
    """
    _check_compat(y, data, params)
    mu, beta, hp = params.mu, params.beta, params.huber
    lam = y.lam.values
    ru, rq, rp, rz = [], [], [], []
    for k in range(y.n_train):
        u, q, p, z = y.u[k], y.q[k], y.p[k], y.z[k]
        du = gradient(u)
        dp = gradient(p)
        r1 = -mu * laplacian(u).values - divergence(q).values + 2 * lam * (
            u.values - data.f[k].values
        )
        h_du = huber.field_value(du, hp)
        r2c1 = h_du.comp1 - q.comp1
        r2c2 = h_du.comp2 - q.comp2
        r3 = -mu * laplacian(p).values - divergence(z).values + 2 * lam * p.values + 2 * (
            u.values - data.u_dag[k].values
        )
        hz = huber.field_prime_apply(du, dp, hp)
        r4c1 = hz.comp1 - z.comp1
        r4c2 = hz.comp2 - z.comp2
        ru.append(ScalarField(y.grid, r1))
        rq.append(VectorField(y.grid, r2c1, r2c2))
        rp.append(ScalarField(y.grid, r3))
        rz.append(VectorField(y.grid, r4c1, r4c2))
    t = -beta * laplacian(y.lam).values + _coupling(y, data)
    r5 = t + beta * lam - np.maximum(0.0, t)
    return OptState(ru, rq, rp, rz, ScalarField(y.grid, r5))


def multiplier(y: OptState, data: ProblemData, params: ModelParams) -> ScalarField:
    """Lagrange multiplier of the bound lam >= 0:
    -beta*Lap(lam) + beta*lam + sum_k (u_k - f_k) p_k."""
    _check_compat(y, data, params)
    vals = (
        -params.beta * laplacian(y.lam).values
        + params.beta * y.lam.values
        + _coupling(y, data)
    )
    return ScalarField(y.grid, vals)


def active_set(y: OptState, data: ProblemData, params: ModelParams) -> ActiveMask:
    """Nodes where the complementarity row pins lam to zero; ties stay inactive."""
    _check_compat(y, data, params)
    t = -params.beta * laplacian(y.lam).values + _coupling(y, data)
    return ActiveMask(y.grid, t > 0)


def complementarity_residual(lam: ScalarField, theta: ScalarField) -> float:
    """Worst violation of lam >= 0, theta >= 0, theta*lam = 0 over all nodes."""
    check_same_grid(lam, theta)
    lv, tv = lam.values, theta.values
    return float(
        max(
            np.max(np.maximum(-lv, 0.0)),
            np.max(np.maximum(-tv, 0.0)),
            np.max(np.abs(lv * tv)),
        )
    )


# ---------------------------------------------------------------------------
# Generalized derivative: matrix-free application and sparse assembly.


def _prime_mats(y: OptState, k: int, params: ModelParams, mode: str) -> np.ndarray:
    du = huber.pair_components(gradient(y.u[k]))
    if mode == "projected":
        return huber.h_prime_projected_matrix(du, huber.pair_components(y.q[k]), params.huber)
    return huber.h_prime_matrix(du, params.huber)


def generalized_derivative_apply(
    y: OptState, dy: OptState, data: ProblemData, params: ModelParams, mode: str = "exact"
) -> OptState:
    """Apply the (possibly projected) Newton derivative at y to a direction dy.

    mode='exact' uses h'(Du) in the dual-constraint rows; mode='projected'
    replaces it by the feasible-direction variant built from the stored q.
    The curvature term in the adjoint constraint stays exact either way.
    """
    if mode not in ("exact", "projected"):
        raise ValueError(f"mode must be 'exact' or 'projected', got {mode!r}")
    _check_compat(y, data, params)
    if dy.n_train != y.n_train:
        raise ValueError("direction has wrong number of pairs")
    check_same_grid(y.lam, dy.lam)
    mu, beta, hp = params.mu, params.beta, params.huber
    lam = y.lam.values
    mask = active_set(y, data, params).values
    keep = ~mask

    ou, oq, op, oz = [], [], [], []
    r5 = np.zeros(y.grid.shape)
    for k in range(y.n_train):
        u, p, q = y.u[k], y.p[k], y.q[k]
        du, dp = gradient(u), gradient(p)
        vu, vp = dy.u[k], dy.p[k]
        vq, vz = dy.q[k], dy.z[k]
        dvu, dvp = gradient(vu), gradient(vp)
        uf = u.values - data.f[k].values

        o1 = (
            -mu * laplacian(vu).values
            + 2 * lam * vu.values
            - divergence(vq).values
            + 2 * uf * dy.lam.values
        )
        if mode == "projected":
            hv = huber.field_prime_projected_apply(du, q, dvu, hp)
            hvp = huber.field_prime_projected_apply(du, q, dvp, hp)
        else:
            hv = huber.field_prime_apply(du, dvu, hp)
            hvp = huber.field_prime_apply(du, dvp, hp)
        o2 = VectorField(y.grid, hv.comp1 - vq.comp1, hv.comp2 - vq.comp2)
        o3 = (
            2 * vu.values
            - mu * laplacian(vp).values
            + 2 * lam * vp.values
            - divergence(vz).values
            + 2 * p.values * dy.lam.values
        )
        curv = huber.field_second_apply(du, dvu, dp, hp)
        o4 = VectorField(
            y.grid, curv.comp1 + hvp.comp1 - vz.comp1, curv.comp2 + hvp.comp2 - vz.comp2
        )
        ou.append(ScalarField(y.grid, o1))
        oq.append(o2)
        op.append(ScalarField(y.grid, o3))
        oz.append(o4)
        r5 += keep * (p.values * vu.values + uf * vp.values)
    r5 += beta * dy.lam.values - beta * keep * laplacian(dy.lam).values
    return OptState(ou, oq, op, oz, ScalarField(y.grid, r5))


def assemble_jacobian(
    y: OptState, data: ProblemData, params: ModelParams, mode: str = "exact"
) -> sp.csr_matrix:
    """Sparse Newton matrix in the flat layout (pairs first, lam last).

    Its action on a flat direction equals generalized_derivative_apply on
    the corresponding state direction.
    """
    if mode not in ("exact", "projected"):
        raise ValueError(f"mode must be 'exact' or 'projected', got {mode!r}")
    _check_compat(y, data, params)
    grid = y.grid
    mu, beta, hp = params.mu, params.beta, params.huber
    ops = _operators(grid)
    lap, grad = ops["lap"], ops["grad"]
    nu = grid.n_nodes
    eye_u = sp.eye(nu, format="csr")
    ns = grad.shape[0]
    eye_s = sp.eye(ns, format="csr")

    lam_diag = sp.diags(y.lam.flat())
    a_op = 2 * lam_diag - mu * lap
    mask = active_set(y, data, params).flat_values()
    keep = sp.diags((~mask).astype(float))

    n_blocks = 4 * params.n_train + 1
    blocks = [[None] * n_blocks for _ in range(n_blocks)]
    for k in range(params.n_train):
        du_pair = huber.pair_components(gradient(y.u[k]))
        dp_pair = huber.pair_components(gradient(y.p[k]))
        hmat = staggered_matrix(grid, _prime_mats(y, k, params, mode))
        curv = staggered_matrix(grid, huber.h_second_matrix(du_pair, dp_pair, hp))
        uf = sp.diags(y.u[k].flat() - data.f[k].flat())
        pd = sp.diags(y.p[k].flat())
        r = 4 * k
        blocks[r][r] = a_op
        blocks[r][r + 1] = grad.T
        blocks[r][n_blocks - 1] = 2 * uf
        blocks[r + 1][r] = hmat @ grad
        blocks[r + 1][r + 1] = -eye_s
        blocks[r + 2][r] = 2 * eye_u
        blocks[r + 2][r + 2] = a_op
        blocks[r + 2][r + 3] = grad.T
        blocks[r + 2][n_blocks - 1] = 2 * pd
        blocks[r + 3][r] = curv @ grad
        blocks[r + 3][r + 2] = hmat @ grad
        blocks[r + 3][r + 3] = -eye_s
        blocks[n_blocks - 1][r] = keep @ pd
        blocks[n_blocks - 1][r + 2] = keep @ uf
    blocks[n_blocks - 1][n_blocks - 1] = beta * eye_u - beta * keep @ lap
    return sp.bmat(blocks, format="csr")


# ---------------------------------------------------------------------------
# Reduced solvers on (u, q) and the derivative oracles for the weight-to-state
# map.


def state_operator(lam: ScalarField, u: ScalarField, params: ModelParams) -> sp.csr_matrix:
    """Linearization of the reduced primal equation at (u, lam):
    -mu*Lap + Grad^T h'(Du) Grad + 2*diag(lam)."""
    grid = lam.grid
    ops = _operators(grid)
    du = huber.pair_components(gradient(u))
    hmat = staggered_matrix(grid, huber.h_prime_matrix(du, params.huber))
    op = -params.mu * ops["lap"] + ops["grad"].T @ hmat @ ops["grad"] + 2 * sp.diags(
        np.maximum(lam.flat(), 0.0)
    )
    if params.mu == 0.0:
        op = op + 1e-12 * sp.eye(grid.n_nodes)
    return op.tocsr()


def solve_state(
    lam: ScalarField,
    f: ScalarField,
    params: ModelParams,
    max_iter: int = 50,
    tol: float = 1e-9,
) -> tuple[ScalarField, VectorField]:
    """Solve the single-image primal equation for a fixed weight field.

    Semismooth Newton on the pair (u, q) with the projected derivative in
    the dual-constraint row, which converges without a line search even for
    large gamma; the dual direction is eliminated per step, so only one
    u-sized sparse solve is needed per iteration.  Negative lam values are
    clamped to zero before solving.  Returns (u, q) with residual norm of
    both rows at most tol.
    """
    check_same_grid(lam, f)
    grid = lam.grid
    ops = _operators(grid)
    lap, grad = ops["lap"], ops["grad"]
    lam_flat = np.maximum(lam.flat(), 0.0)
    f_flat = f.flat()
    a_op = (-params.mu * lap + 2 * sp.diags(lam_flat)).tocsr()
    shift = 1e-12 * sp.eye(grid.n_nodes) if params.mu == 0.0 else None

    u = f_flat.copy()
    du_pair = huber.pair_components(VectorField.from_flat(grid, grad @ u))
    q = huber.split_components(grid, huber.h_value(du_pair, params.huber)).flat()
    rn0 = None
    for it in range(max_iter + 1):
        du_pair = huber.pair_components(VectorField.from_flat(grid, grad @ u))
        h_du = huber.split_components(grid, huber.h_value(du_pair, params.huber)).flat()
        r1 = a_op @ u - 2 * lam_flat * f_flat + grad.T @ q
        r2 = h_du - q
        rn = float(np.sqrt(r1 @ r1 + r2 @ r2))
        rn0 = rn if rn0 is None else rn0
        if rn <= tol:
            return ScalarField.from_flat(grid, u), VectorField.from_flat(grid, q)
        if not np.isfinite(rn) or rn > 1e8 * (1.0 + rn0):
            raise SolverError(
                f"primal solve diverged (residual {rn:.3e})", residual=rn, iteration=it
            )
        if it == max_iter:
            break
        q_pair = huber.pair_components(VectorField.from_flat(grid, q))
        h_proj = staggered_matrix(
            grid, huber.h_prime_projected_matrix(du_pair, q_pair, params.huber)
        )
        op = a_op + grad.T @ h_proj @ grad
        if shift is not None:
            op = op + shift
        try:
            du = spla.splu(op.tocsc()).solve(-(r1 + grad.T @ r2))
        except RuntimeError as exc:
            raise SolverError(f"primal linearization is singular: {exc}", residual=rn)
        q = q + h_proj @ (grad @ du) + r2
        u = u + du
    raise SolverError(
        f"primal solve did not reach tolerance {tol:.1e} in {max_iter} iterations "
        f"(residual {rn:.3e})",
        residual=rn,
        iteration=max_iter,
    )


def solve_linearized_state(
    lam: ScalarField,
    u: ScalarField,
    f: ScalarField,
    xi: ScalarField,
    params: ModelParams,
) -> ScalarField:
    """Derivative of the weight-to-reconstruction map in direction xi.

    Solves (-mu*Lap + Grad^T h'(Du) Grad + 2 lam) dz = -2 xi (u - f); the
    context (u, lam) should come from a converged primal solve.
    """
    check_same_grid(lam, u, f, xi)
    grid = lam.grid
    op = state_operator(lam, u, params)
    rhs = (-2.0 * xi.values * (u.values - f.values)).ravel(order="F")
    try:
        sol = spla.splu(op.tocsc()).solve(rhs)
    except RuntimeError as exc:
        raise SolverError(f"linearized primal operator is singular: {exc}")
    return ScalarField.from_flat(grid, sol)


def solve_second_derivative(
    lam: ScalarField,
    u: ScalarField,
    f: ScalarField,
    xi: ScalarField,
    zeta: ScalarField,
    params: ModelParams,
    z_xi: ScalarField | None = None,
    z_zeta: ScalarField | None = None,
) -> ScalarField:
    """Second derivative of the weight-to-reconstruction map along (xi, zeta).

    Differentiating the linearized equation once more gives
        L w = Div(h''(Du)[Dz_xi, Dz_zeta]) - 2 zeta z_xi - 2 xi z_zeta,
    with the same operator L as in solve_linearized_state.  The first
    derivatives are computed here unless supplied.
    """
    check_same_grid(lam, u, f, xi, zeta)
    grid = lam.grid
    if z_xi is None:
        z_xi = solve_linearized_state(lam, u, f, xi, params)
    if z_zeta is None:
        z_zeta = solve_linearized_state(lam, u, f, zeta, params)
    du = gradient(u)
    curv = huber.field_second_apply(du, gradient(z_xi), gradient(z_zeta), params.huber)
    rhs_field = (
        divergence(curv).values
        - 2.0 * zeta.values * z_xi.values
        - 2.0 * xi.values * z_zeta.values
    )
    op = state_operator(lam, u, params)
    try:
        sol = spla.splu(op.tocsc()).solve(rhs_field.ravel(order="F"))
    except RuntimeError as exc:
        raise SolverError(f"second-derivative operator is singular: {exc}")
    return ScalarField.from_flat(grid, sol)
