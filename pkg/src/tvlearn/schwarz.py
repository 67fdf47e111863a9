"""Overlapping strip decomposition of the coupled optimality system.

The grid is cut into M horizontal strips (split along axis 0) overlapping by
exactly L rows.  Each strip solves its restricted Newton system with the
interface rows of u, p and the weight field replaced by Robin (optimized) or
Dirichlet (classical) exchange rows fed from the previous merged iterate; the
dual fields q, z stay purely local since their rows are algebraic.  Merging
uses linear partition-of-unity ramps across each overlap band.
"""

from __future__ import annotations

import io
import math
import time
from dataclasses import dataclass, field, replace
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import scipy.sparse as sp

from .errors import SolverError
from .grid import GridSpec, ScalarField, VectorField
from .ssn import SsnConfig, SsnReport, ssn_solve
from .system import (
    ModelParams,
    OptState,
    ProblemData,
    assemble_jacobian,
    residual,
)

MU_FLOOR = 1e-8


@dataclass(frozen=True)
class SubdomainLayout:
    """Strip partition along axis 0: ranges[j] = (start, width) in rows."""

    grid: GridSpec
    m_sub: int
    overlap: int
    ranges: tuple

    @property
    def windows(self):
        return self.ranges

    def interfaces(self, j: int) -> list:
        """Artificial interfaces of strip j as (side, global_row) pairs;
        side 'left' faces strip j-1, side 'right' faces strip j+1."""
        start, width = self.ranges[j]
        out = []
        if j > 0:
            out.append(("left", start))
        if j < self.m_sub - 1:
            out.append(("right", start + width - 1))
        return out


def partition(grid: GridSpec, M: int, L: int) -> SubdomainLayout:
    """Near-equal strips of width ceil((m + (M-1)L)/M), overlapping by
    exactly L rows; the last strip is clamped to the grid end."""
    if M < 1:
        raise ValueError(f"subdomain count must be >= 1, got {M}")
    if M == 1:
        return SubdomainLayout(grid, 1, L, ((0, grid.m),))
    if L < 1:
        raise ValueError(f"overlap must be >= 1, got {L}")
    n = grid.m
    width = math.ceil((n + (M - 1) * L) / M)
    stride = width - L
    if width < L + 2 or stride < 1 or width > n:
        raise ValueError(
            f"infeasible partition: {M} strips with overlap {L} on {n} rows"
        )
    starts = [min(j * stride, n - width) for j in range(M)]
    for a, b in zip(starts[:-1], starts[1:]):
        if b - a != stride:
            raise ValueError(
                f"infeasible partition: {M} strips with overlap {L} on {n} rows"
            )
    return SubdomainLayout(grid, M, L, tuple((s, width) for s in starts))


@dataclass(frozen=True)
class TransmissionSpec:
    """Robin data for every artificial interface.

    s_u[(j, side)] and s_p[(j, side)] hold the nodewise Robin coefficient
    along that interface row; s_lambda[(j, side)] is the printed +-1.  For
    the classical kind the exchange is Dirichlet and the tables are empty.
    """

    kind: str
    s_u: dict = field(default_factory=dict)
    s_p: dict = field(default_factory=dict)
    s_lambda: dict = field(default_factory=dict)


def _interface_sign(side: str) -> float:
    # + on the right edge of the left strip of a pair, - on the left edge
    # of the right strip.
    return 1.0 if side == "right" else -1.0


def transmission_params(
    lambda_k: ScalarField, params: ModelParams, layout: SubdomainLayout, kind: str
) -> TransmissionSpec:
    if kind not in ("classical", "optimized"):
        raise ValueError(f"unknown transmission kind {kind!r}")
    if kind == "classical":
        return TransmissionSpec(kind="classical")
    mu_eff = max(params.mu, MU_FLOOR)
    s_u, s_p, s_l = {}, {}, {}
    for j in range(layout.m_sub):
        for side, row in layout.interfaces(j):
            sign = _interface_sign(side)
            coeff = sign * np.sqrt(2.0 * np.maximum(lambda_k.values[row, :], 0.0) / mu_eff)
            s_u[(j, side)] = coeff
            s_p[(j, side)] = coeff.copy()
            s_l[(j, side)] = sign
    return TransmissionSpec(kind="optimized", s_u=s_u, s_p=s_p, s_lambda=s_l)


def _restrict_state(y: OptState, grid_sub: GridSpec, start: int) -> OptState:
    stop = start + grid_sub.m
    us, qs, ps, zs = [], [], [], []
    for k in range(y.n_train):
        us.append(ScalarField(grid_sub, y.u[k].values[start:stop, :].copy()))
        qs.append(
            VectorField(
                grid_sub,
                y.q[k].comp1[start : stop - 1, :].copy(),
                y.q[k].comp2[start:stop, :].copy(),
            )
        )
        ps.append(ScalarField(grid_sub, y.p[k].values[start:stop, :].copy()))
        zs.append(
            VectorField(
                grid_sub,
                y.z[k].comp1[start : stop - 1, :].copy(),
                y.z[k].comp2[start:stop, :].copy(),
            )
        )
    lam = ScalarField(grid_sub, y.lam.values[start:stop, :].copy())
    return OptState(us, qs, ps, zs, lam)


def _restrict_data(data: ProblemData, grid_sub: GridSpec, start: int) -> ProblemData:
    stop = start + grid_sub.m
    fs = [ScalarField(grid_sub, f.values[start:stop, :].copy()) for f in data.f]
    uds = [ScalarField(grid_sub, u.values[start:stop, :].copy()) for u in data.u_dag]
    return ProblemData(fs, uds)


def _flat_index_maps(W: int, l: int, n_train: int):
    """Per-variable flat offsets for a W x l strip state."""
    U = W * l
    S1 = (W - 1) * l
    S2 = W * (l - 1)
    pair = 2 * U + 2 * S1 + 2 * S2
    return U, S1, S2, pair, n_train * pair + U


class _InterfaceSurgery:
    """Row replacement for one strip solve against the frozen global iterate.

    Every artificial-interface row of u_k, p_k and the weight field is
    replaced: optimized kind installs one-sided Robin rows
    (v[c]-v[c_in])/h + S*v[c] = same expression on the previous merged
    iterate, classical kind pins the trace values.  The dual rows at the
    interface's own horizontal edges keep their algebraic form but their
    staggered average is truncated at the strip edge, so they are
    re-evaluated on a one-row ghost extension whose u and p come from the
    neighbor's previous iterate; q and z carry no exchanged data.
    """

    def __init__(self, y_prev, data, params, layout, spec, j, grid_sub, start, mode):
        self.enabled = layout.m_sub > 1 and len(layout.interfaces(j)) > 0
        if not self.enabled:
            return
        self.params = params
        self.mode = mode
        W, l = grid_sub.m, grid_sub.l
        h = grid_sub.h
        self.W, self.l = W, l
        U, S1, S2, pair, n_total = _flat_index_maps(W, l, params.n_train)
        cols = np.arange(l)
        rows_idx, mat_rows, mat_cols, mat_vals, rhs_vals = [], [], [], [], []

        def add_rows(block_offset, local_row, local_in, coeff, orient, v_glob, g_row, g_in):
            # orient carries the one-sided difference in the fixed +x sense on
            # both sides, so the signed Robin coefficient keeps each strip's
            # condition absorbing (left edges would otherwise get ∂n - S).
            idx = block_offset + local_row + cols * W
            idx_in = block_offset + local_in + cols * W
            rows_idx.append(idx)
            if spec.kind == "optimized":
                mat_rows.extend([idx, idx])
                mat_cols.extend([idx, idx_in])
                mat_vals.extend([orient / h + coeff, np.full(l, -orient / h)])
                rhs_vals.append(
                    orient * (v_glob[g_row, :] - v_glob[g_in, :]) / h
                    + coeff * v_glob[g_row, :]
                )
            else:
                mat_rows.append(idx)
                mat_cols.append(idx)
                mat_vals.append(np.ones(l))
                rhs_vals.append(v_glob[g_row, :].copy())

        for side, g_row in layout.interfaces(j):
            local_row = g_row - start
            local_in = local_row + (1 if side == "left" else -1)
            g_in = g_row + (1 if side == "left" else -1)
            orient = -1.0 if side == "left" else 1.0
            if spec.kind == "optimized":
                cu = spec.s_u[(j, side)]
                cp = spec.s_p[(j, side)]
                cl = np.full(l, spec.s_lambda[(j, side)])
            else:
                cu = cp = cl = None
            for k in range(params.n_train):
                base = k * pair
                add_rows(
                    base, local_row, local_in, cu, orient,
                    y_prev.u[k].values, g_row, g_in,
                )
                add_rows(
                    base + U + S1 + S2, local_row, local_in, cp, orient,
                    y_prev.p[k].values, g_row, g_in,
                )
            add_rows(
                params.n_train * pair, local_row, local_in, cl, orient,
                y_prev.lam.values, g_row, g_in,
            )

        self.rows = np.concatenate(rows_idx)
        self.rhs = np.concatenate(rhs_vals)
        r = np.concatenate(mat_rows)
        c = np.concatenate(mat_cols)
        v = np.concatenate(mat_vals)
        self.robin = sp.coo_matrix((v, (r, c)), shape=(n_total, n_total)).tocsr()
        self.robin_rows = self.robin[self.rows, :]
        keep = np.ones(n_total)
        keep[self.rows] = 0.0
        self.keep = sp.diags(keep)
        self._build_ghost(y_prev, data, layout, j, grid_sub, start)

    def _build_ghost(self, y_prev, data, layout, j, grid_sub, start):
        """Ghost extension bookkeeping for the dual rows at interface edges.

        The extended strip adds one frozen row per artificial side.  Maps are
        kept between local flat indices and extended flat indices, plus the
        list of (local dual row, extended dual row) pairs to re-evaluate.
        """
        W, l = self.W, self.l
        n_train = self.params.n_train
        sides = [side for side, _ in layout.interfaces(j)]
        self.off = 1 if "left" in sides else 0
        ext_rows = W + len(sides)
        self.ext_grid = GridSpec(ext_rows, l, grid_sub.h)
        a = start - self.off
        self.ext_data = _restrict_data(data, self.ext_grid, a)
        self.frozen = _restrict_state(y_prev, self.ext_grid, a)

        U, S1, S2, pair, n_loc = _flat_index_maps(W, l, n_train)
        Ue, S1e, S2e, paire, n_ext = _flat_index_maps(ext_rows, l, n_train)
        self.n_ext = n_ext

        # scatter map: local flat index -> extended flat index
        node = np.add.outer(np.arange(W) + self.off, np.arange(l) * ext_rows).ravel(order="F")
        edge1 = np.add.outer(np.arange(W - 1) + self.off, np.arange(l) * (ext_rows - 1)).ravel(order="F")
        edge2 = np.add.outer(np.arange(W) + self.off, np.arange(l - 1) * ext_rows).ravel(order="F")
        scat = np.empty(n_loc, dtype=np.int64)
        for k in range(n_train):
            b, be = k * pair, k * paire
            scat[b : b + U] = be + node
            scat[b + U : b + U + S1] = be + Ue + edge1
            scat[b + U + S1 : b + U + S1 + S2] = be + Ue + S1e + edge2
            scat[b + U + S1 + S2 : b + 2 * U + S1 + S2] = be + Ue + S1e + S2e + node
            scat[b + 2 * U + S1 + S2 : b + 2 * U + 2 * S1 + S2] = be + 2 * Ue + S1e + S2e + edge1
            scat[b + 2 * U + 2 * S1 + S2 : b + pair] = be + 2 * Ue + 2 * S1e + S2e + edge2
        scat[n_train * pair :] = n_train * paire + node
        self.scatter = scat

        # dual rows (q and z) at the interface rows' horizontal edges
        loc_rows, ext_rows_idx = [], []
        ec = np.arange(l - 1)
        for side in sides:
            lr = 0 if side == "left" else W - 1
            er = lr + self.off
            for k in range(n_train):
                b, be = k * pair, k * paire
                for loc_off, ext_off in (
                    (U + S1, Ue + S1e),
                    (2 * U + 2 * S1 + S2, 2 * Ue + 2 * S1e + S2e),
                ):
                    loc_rows.append(b + loc_off + lr + ec * W)
                    ext_rows_idx.append(be + ext_off + er + ec * ext_rows)
        self.dual_rows = np.concatenate(loc_rows)
        self.dual_rows_ext = np.concatenate(ext_rows_idx)

    def _extended_state(self, y_local) -> OptState:
        ext = self.frozen.copy()
        lo, hi = self.off, self.off + self.W
        for k in range(self.params.n_train):
            ext.u[k].values[lo:hi, :] = y_local.u[k].values
            ext.p[k].values[lo:hi, :] = y_local.p[k].values
            ext.q[k].comp1[lo : hi - 1, :] = y_local.q[k].comp1
            ext.q[k].comp2[lo:hi, :] = y_local.q[k].comp2
            ext.z[k].comp1[lo : hi - 1, :] = y_local.z[k].comp1
            ext.z[k].comp2[lo:hi, :] = y_local.z[k].comp2
        ext.lam.values[lo:hi, :] = y_local.lam.values
        return ext

    def modify_jacobian(self, y_local, jac):
        if not self.enabled:
            return jac
        out = (self.keep @ jac + self.robin).tolil()
        ext = self._extended_state(y_local)
        jac_ext = assemble_jacobian(ext, self.ext_data, self.params, self.mode)
        gather = np.full(self.n_ext, -1, dtype=np.int64)
        gather[self.scatter] = np.arange(self.scatter.size)
        sub = jac_ext[self.dual_rows_ext, :].tocoo()
        keep_cols = gather[sub.col] >= 0
        out[self.dual_rows, :] = 0.0
        out_rows = self.dual_rows[sub.row[keep_cols]]
        out_cols = gather[sub.col[keep_cols]]
        patch = sp.coo_matrix(
            (sub.data[keep_cols], (out_rows, out_cols)), shape=out.shape
        )
        return (out.tocsr() + patch.tocsr()).tocsr()

    def modify_residual(self, y_local, vec):
        if not self.enabled:
            return vec
        out = vec.copy()
        out[self.rows] = self.robin_rows @ y_local.flat() - self.rhs
        ext = self._extended_state(y_local)
        r_ext = residual(ext, self.ext_data, self.params).flat()
        out[self.dual_rows] = r_ext[self.dual_rows_ext]
        return out


def _solve_subdomain_report(
    y_k: OptState,
    data: ProblemData,
    params: ModelParams,
    layout: SubdomainLayout,
    spec: TransmissionSpec,
    j: int,
    config: SsnConfig,
):
    start, width = layout.ranges[j]
    grid_sub = GridSpec(width, layout.grid.l, layout.grid.h)
    y_local = _restrict_state(y_k, grid_sub, start)
    data_local = _restrict_data(data, grid_sub, start)
    surgery = _InterfaceSurgery(
        y_k, data, params, layout, spec, j, grid_sub, start, config.mode
    )
    try:
        return ssn_solve(
            y_local,
            data_local,
            params,
            config,
            modify_jacobian=surgery.modify_jacobian,
            modify_residual=surgery.modify_residual,
        )
    except SolverError as exc:
        raise SolverError(
            f"subdomain {j}: {exc}",
            residual=exc.residual,
            iteration=exc.iteration,
            subdomain=j,
        ) from exc


def solve_subdomain(
    y_k: OptState,
    data: ProblemData,
    params: ModelParams,
    layout: SubdomainLayout,
    spec: TransmissionSpec,
    j: int,
    config: SsnConfig,
) -> OptState:
    """Solve strip j against the frozen global iterate y_k; returns the local
    state on the strip's grid."""
    local, _ = _solve_subdomain_report(y_k, data, params, layout, spec, j, config)
    return local


def _ramp_weights(layout: SubdomainLayout) -> np.ndarray:
    """Per-strip weight profiles over global rows; rows of the returned
    (M, m) array sum to exactly 1."""
    M = layout.m_sub
    m = layout.grid.m
    w = np.zeros((M, m))
    for j, (start, width) in enumerate(layout.ranges):
        w[j, start : start + width] = 1.0
    for j in range(M - 1):
        s_next = layout.ranges[j + 1][0]
        e_prev = layout.ranges[j][0] + layout.ranges[j][1]
        L = e_prev - s_next
        if L == 1:
            ramp = np.array([0.5])
        else:
            ramp = np.arange(L) / (L - 1.0)
        w[j + 1, s_next:e_prev] = ramp
        w[j, s_next:e_prev] = 1.0 - ramp
    return w


def merge(locals_: list, layout: SubdomainLayout) -> OptState:
    """Combine strip solutions into a global state with linear
    partition-of-unity ramps; staggered comp1 edges use the weight of their
    upper node."""
    if len(locals_) != layout.m_sub:
        raise ValueError(
            f"need {layout.m_sub} local states, got {len(locals_)}"
        )
    if layout.m_sub == 1:
        return locals_[0].copy()
    grid = layout.grid
    n_train = locals_[0].n_train
    w = _ramp_weights(layout)

    def combine(getter, shape, row_of):
        out = np.zeros(shape)
        for j, (start, width) in enumerate(layout.ranges):
            arr = getter(locals_[j])
            rows = np.arange(row_of(start, width)[0], row_of(start, width)[1])
            out[rows, :] += w[j, rows][:, None] * arr
        return out

    full = lambda s, width: (s, s + width)
    comp1_rows = lambda s, width: (s, s + width - 1)

    us, qs, ps, zs = [], [], [], []
    for k in range(n_train):
        uk = combine(lambda yl: yl.u[k].values, grid.shape, full)
        pk = combine(lambda yl: yl.p[k].values, grid.shape, full)
        q1 = combine(lambda yl: yl.q[k].comp1, (grid.m - 1, grid.l), comp1_rows)
        q2 = combine(lambda yl: yl.q[k].comp2, (grid.m, grid.l - 1), full)
        z1 = combine(lambda yl: yl.z[k].comp1, (grid.m - 1, grid.l), comp1_rows)
        z2 = combine(lambda yl: yl.z[k].comp2, (grid.m, grid.l - 1), full)
        us.append(ScalarField(grid, uk))
        ps.append(ScalarField(grid, pk))
        qs.append(VectorField(grid, q1, q2))
        zs.append(VectorField(grid, z1, z2))
    lam = ScalarField(grid, combine(lambda yl: yl.lam.values, grid.shape, full))
    return OptState(us, qs, ps, zs, lam)


def subdomain_gap(locals_: list, layout: SubdomainLayout) -> float:
    """Mean over adjacent strip pairs of the Euclidean norm of the weight
    difference over the full overlap window."""
    if layout.m_sub < 2:
        raise ValueError("subdomain_gap needs at least 2 subdomains")
    total = 0.0
    for j in range(layout.m_sub - 1):
        s_j, w_j = layout.ranges[j]
        s_n, _ = layout.ranges[j + 1]
        e_j = s_j + w_j
        left = locals_[j].lam.values[s_n - s_j : e_j - s_j, :]
        right = locals_[j + 1].lam.values[0 : e_j - s_n, :]
        total += float(np.linalg.norm(left - right))
    return total / (layout.m_sub - 1)


@dataclass(frozen=True)
class DdRecord:
    outer_iter: int
    subdomain: int
    ssn_iters: int
    residual: float
    gap_lambda: float
    wall_seconds: float


def write_dd_csv(records: list, stream) -> None:
    stream.write("outer_iter,subdomain,ssn_iters,residual,gap_lambda,wall_seconds\n")
    for r in records:
        stream.write(
            f"{r.outer_iter},{r.subdomain},{r.ssn_iters},{r.residual:.9e},"
            f"{r.gap_lambda:.9e},{r.wall_seconds:.3f}\n"
        )


def dd_solve(
    y0: OptState,
    data: ProblemData,
    params: ModelParams,
    M: int,
    L: int,
    kind: str,
    outer_iters: int = 2,
    config: SsnConfig | None = None,
    gap_tol: float | None = None,
    threads: int = 1,
) -> tuple:
    """Alternating strip solves and merges.

    Per outer iteration: refresh transmission coefficients from the current
    weight field, solve all strips against the frozen iterate (optionally in
    a thread pool; results are scheduling-independent), record the overlap
    gap before merging, then merge.  Returns the final state and the per
    (outer, strip) records.
    """
    if outer_iters < 1:
        raise ValueError(f"outer_iters must be >= 1, got {outer_iters}")
    layout = partition(y0.grid, M, L)
    if config is None:
        config = SsnConfig()
    worker_config = replace(config, log_stream=None)
    y = y0.copy()
    records = []
    for outer in range(1, outer_iters + 1):
        spec = transmission_params(y.lam, params, layout, kind)

        def solve_one(j):
            t0 = time.perf_counter()
            local, report = _solve_subdomain_report(
                y, data, params, layout, spec, j, worker_config
            )
            return local, report, time.perf_counter() - t0

        if threads > 1 and layout.m_sub > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(solve_one, range(layout.m_sub)))
        else:
            results = [solve_one(j) for j in range(layout.m_sub)]

        locals_ = [r[0] for r in results]
        gap = subdomain_gap(locals_, layout) if layout.m_sub > 1 else 0.0
        for j, (_, report, wall) in enumerate(results):
            records.append(
                DdRecord(
                    outer_iter=outer,
                    subdomain=j,
                    ssn_iters=report.iterations,
                    residual=report.residual_history[-1],
                    gap_lambda=gap,
                    wall_seconds=wall,
                )
            )
        y = merge(locals_, layout)
        if gap_tol is not None and gap <= gap_tol:
            break
    return y, records
