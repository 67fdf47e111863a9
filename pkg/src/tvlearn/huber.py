"""Pointwise C2 regularizer maps on gradient samples.

The map h sends a 2-vector z to a dual vector of length at most one.  For
large gradients it saturates at z/|z| (region A), for small ones it is the
linear map gamma*z (region I), and a polynomial radial profile bridges the
band in between (region S) with matching value and first two radial
derivatives, so h is twice continuously differentiable.

Everything here is radial, h(z) = w(|z|) z/|z|, which reduces the first
derivative to c_tt*Id + (c_rr - c_tt) zh zh^T with zh := z/|z|, c_rr := w',
c_tt := w/|z|, and the second derivative to rank-one corrections built from
the same profile.  All routines are vectorized over arrays of shape
(..., 2); the trailing axis holds the two vector components.

Field-level wrappers at the bottom pair the two staggered components of a
VectorField at their common lower-left node (missing fringe components count
as zero), apply the pointwise map per node, and slice the results back to
the staggered shapes.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .grid import VectorField, check_same_grid


@dataclass(frozen=True)
class HuberParams:
    """Smoothing parameter gamma with the derived band edges a, b.

    The band is a < gamma|z| < b with a = 1 - 1/(2 gamma) and
    b = 1 + 1/(2 gamma); gamma must exceed 1/2 so that a stays positive
    and 0 < a < 1 < b holds.
    """

    gamma: float
    a: float = field(init=False)
    b: float = field(init=False)

    def __post_init__(self):
        if not self.gamma > 0.5:
            raise ValueError(
                f"gamma must exceed 0.5 so the inner threshold 1 - 1/(2 gamma) "
                f"stays positive, got {self.gamma}"
            )
        object.__setattr__(self, "a", 1.0 - 1.0 / (2.0 * self.gamma))
        object.__setattr__(self, "b", 1.0 + 1.0 / (2.0 * self.gamma))


class RegionLabel(enum.Enum):
    """Branch of the piecewise map: A saturated, S transition band, I linear."""

    A = "A"
    S = "S"
    I = "I"


def _region_masks(gr: np.ndarray, params: HuberParams):
    """Boolean masks (active, smooth, inactive) for scaled radii gr = gamma|z|.

    Both boundaries are closed away from S: gr = a is inactive, gr = b active.
    """
    act = gr >= params.b
    inact = gr <= params.a
    return act, ~(act | inact), inact


def _profiles(r: np.ndarray, params: HuberParams):
    """Radial profile w(r) with first and second derivatives, branchwise.

    A: w = 1.  I: w = gamma*r.  S: the quartic bridge
    w = (2g-1)/(4g) + gr/2 - (g/2) s + (g^3/2) s^2 with g := gamma,
    gr := g*r and s := (gr - a)(gr - b); its derivatives simplify to
    w' = g/2 + g^2 (gr - 1)(2 g^2 s - 1) and w'' = 6 g^5 s, vanishing at
    both edges together with the branch mismatches (C2 join).
    """
    gamma = params.gamma
    gr = gamma * r
    act, _, inact = _region_masks(gr, params)
    s = (gr - params.a) * (gr - params.b)
    w_s = (2 * gamma - 1) / (4 * gamma) + gr / 2 - (gamma / 2) * s + (gamma**3 / 2) * s * s
    dw_s = gamma / 2 + gamma**2 * (gr - 1.0) * (2 * gamma**2 * s - 1.0)
    ddw_s = 6 * gamma**5 * s
    w = np.where(act, 1.0, np.where(inact, gr, w_s))
    dw = np.where(act, 0.0, np.where(inact, gamma, dw_s))
    ddw = np.where(act | inact, 0.0, ddw_s)
    return w, dw, ddw


def _prep(z) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (z array, radii, division-safe radii)."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != 2:
        raise ValueError(f"expected trailing axis of size 2, got shape {z.shape}")
    r = np.linalg.norm(z, axis=-1)
    return z, r, np.where(r > 0, r, 1.0)


def classify(z, params: HuberParams) -> RegionLabel:
    """Region of a single 2-vector."""
    z = np.asarray(z, dtype=float)
    gr = params.gamma * float(np.linalg.norm(z))
    if gr >= params.b:
        return RegionLabel.A
    if gr <= params.a:
        return RegionLabel.I
    return RegionLabel.S


def h_value(z, params: HuberParams) -> np.ndarray:
    """Evaluate h at z, shape (..., 2) -> (..., 2).

    Radially w(|z|) z/|z|; the I-branch limit at z = 0 is 0.  The output
    norm never exceeds one.
    """
    z, r, rs = _prep(z)
    w, dw, _ = _profiles(r, params)
    scale = np.where(r > 0, w / rs, dw)
    return scale[..., None] * z


def h_prime_apply(zu, xi, params: HuberParams) -> np.ndarray:
    """Apply the derivative of h at zu to the direction xi.

    The matrix is c_tt*Id + (c_rr - c_tt) zh zh^T with c_rr = w'(r) and
    c_tt = w(r)/r (continued by w'(0) at r = 0, where it equals gamma*Id).
    Symmetric positive semidefinite at every point.
    """
    zu, r, rs = _prep(zu)
    xi = np.asarray(xi, dtype=float)
    w, dw, _ = _profiles(r, params)
    ctt = np.where(r > 0, w / rs, dw)
    zh = zu / rs[..., None]
    along = np.sum(zh * xi, axis=-1)
    return ctt[..., None] * xi + ((dw - ctt) * along)[..., None] * zh


def h_second_apply(zu, xi, tau, params: HuberParams) -> np.ndarray:
    """Apply the second derivative of h at zu to the pair (xi, tau).

    With c := (w'/r - w/r^2) this is
        c (<zh,tau> xi + <xi,tau> zh + <zh,xi> tau)
        + (w'' - 3c) <zh,xi> <zh,tau> zh,
    which is symmetric under exchanging xi and tau and vanishes identically
    on the linear I branch.
    """
    zu, r, rs = _prep(zu)
    xi = np.asarray(xi, dtype=float)
    tau = np.asarray(tau, dtype=float)
    w, dw, ddw = _profiles(r, params)
    ctt = np.where(r > 0, w / rs, dw)
    c = np.where(r > 0, (dw - ctt) / rs, 0.0)
    zh = zu / rs[..., None]
    zx = np.sum(zh * xi, axis=-1)
    zt = np.sum(zh * tau, axis=-1)
    xt = np.sum(xi * tau, axis=-1)
    radial = (ddw - 3 * c) * zx * zt
    return c[..., None] * (zt[..., None] * xi + xt[..., None] * zh + zx[..., None] * tau) + radial[
        ..., None
    ] * zh


def p_weights(zu, params: HuberParams) -> tuple[float, float]:
    """Profile weights (P1, P2) = (w(r), w'(r)) used by the projected derivative.

    Defined for gamma|zu| >= a only: the saturated branch returns (1, 0),
    the band returns the bridge profile values, and P1 always lies in
    [1 - 1/(2 gamma), 1].
    """
    zu = np.asarray(zu, dtype=float)
    r = float(np.linalg.norm(zu))
    if params.gamma * r < params.a:
        raise ValueError(
            f"p_weights undefined for gamma|z| = {params.gamma * r:.6g} below a = {params.a:.6g}"
        )
    w, dw, _ = _profiles(np.asarray(r), params)
    return float(w), float(dw)


def clip_dual(q) -> np.ndarray:
    """Scale q back to the unit ball where it exceeds it: q / max(1, |q|)."""
    q = np.asarray(q, dtype=float)
    qn = np.linalg.norm(q, axis=-1)
    return q / np.maximum(1.0, qn)[..., None]


def h_prime_projected_apply(zu, q_current, xi, params: HuberParams) -> np.ndarray:
    """Derivative of h at zu applied to xi, with the outgoing direction
    replaced by the clipped current dual qt := q_current / max(1, |q_current|).

    A-branch: xi/r - (<zu,xi>/r^2) qt; S-branch:
    (<zu,qt>/r^2) xi + ((P2/P1 - 1/r)/r) <zu,xi> qt; I-branch: plain
    gamma*xi.  Substituting qt = h_value(zu) recovers h_prime_apply exactly
    on A and S.
    """
    zu, r, rs = _prep(zu)
    xi = np.asarray(xi, dtype=float)
    qt = clip_dual(q_current)
    act, _, inact = _region_masks(params.gamma * r, params)
    w, dw, _ = _profiles(r, params)
    zdotxi = np.sum(zu * xi, axis=-1)
    zdotq = np.sum(zu * qt, axis=-1)
    out_a = xi / rs[..., None] - (zdotxi / rs**2)[..., None] * qt
    coef = (dw / np.where(w > 0, w, 1.0) - 1.0 / rs) / rs
    out_s = (zdotq / rs**2)[..., None] * xi + (coef * zdotxi)[..., None] * qt
    out_i = params.gamma * xi
    return np.where(act[..., None], out_a, np.where(inact[..., None], out_i, out_s))


# ---------------------------------------------------------------------------
# 2x2 matrix forms, for sparse assembly.


def h_prime_matrix(zu, params: HuberParams) -> np.ndarray:
    """The symmetric 2x2 derivative matrix at each point, shape (..., 2, 2)."""
    zu, r, rs = _prep(zu)
    w, dw, _ = _profiles(r, params)
    ctt = np.where(r > 0, w / rs, dw)
    zh = zu / rs[..., None]
    outer = zh[..., :, None] * zh[..., None, :]
    return ctt[..., None, None] * np.eye(2) + (dw - ctt)[..., None, None] * outer


def h_second_matrix(zu, xi, params: HuberParams) -> np.ndarray:
    """Matrix tau -> h_second_apply(zu, xi, tau), shape (..., 2, 2)."""
    zu, r, rs = _prep(zu)
    xi = np.asarray(xi, dtype=float)
    w, dw, ddw = _profiles(r, params)
    ctt = np.where(r > 0, w / rs, dw)
    c = np.where(r > 0, (dw - ctt) / rs, 0.0)
    zh = zu / rs[..., None]
    zx = np.sum(zh * xi, axis=-1)
    sym = xi[..., :, None] * zh[..., None, :] + zh[..., :, None] * xi[..., None, :]
    outer = zh[..., :, None] * zh[..., None, :]
    eye = np.eye(2)
    return (
        c[..., None, None] * (sym + zx[..., None, None] * eye)
        + ((ddw - 3 * c) * zx)[..., None, None] * outer
    )


def h_prime_projected_matrix(zu, q_current, params: HuberParams) -> np.ndarray:
    """Matrix form of h_prime_projected_apply, shape (..., 2, 2).

    Not symmetric in general: the outgoing direction is the clipped dual,
    the incoming one stays zu.
    """
    zu, r, rs = _prep(zu)
    qt = clip_dual(q_current)
    act, _, inact = _region_masks(params.gamma * r, params)
    w, dw, _ = _profiles(r, params)
    eye = np.eye(2)
    qz = qt[..., :, None] * zu[..., None, :]
    mat_a = eye / rs[..., None, None] - qz / (rs**2)[..., None, None]
    zdotq = np.sum(zu * qt, axis=-1)
    coef = (dw / np.where(w > 0, w, 1.0) - 1.0 / rs) / rs
    mat_s = (zdotq / rs**2)[..., None, None] * eye + coef[..., None, None] * qz
    mat_i = params.gamma * np.broadcast_to(eye, mat_a.shape)
    return np.where(
        act[..., None, None], mat_a, np.where(inact[..., None, None], mat_i, mat_s)
    )


# ---------------------------------------------------------------------------
# Field-level wrappers on staggered vector fields.


def pair_components(q: VectorField) -> np.ndarray:
    """Collect both staggered components at their shared node, shape (m, l, 2).

    Component 1 is missing on the last row and component 2 on the last
    column; those slots are zero.
    """
    m, l = q.grid.shape
    z = np.zeros((m, l, 2))
    z[: m - 1, :, 0] = q.comp1
    z[:, : l - 1, 1] = q.comp2
    return z


def split_components(grid, z: np.ndarray) -> VectorField:
    """Inverse of pair_components: slice (m, l, 2) back to staggered shapes."""
    m, l = grid.shape
    return VectorField(grid, z[: m - 1, :, 0].copy(), z[:, : l - 1, 1].copy())


def field_value(du: VectorField, params: HuberParams) -> VectorField:
    return split_components(du.grid, h_value(pair_components(du), params))


def field_prime_apply(du: VectorField, xi: VectorField, params: HuberParams) -> VectorField:
    check_same_grid(du, xi)
    return split_components(
        du.grid, h_prime_apply(pair_components(du), pair_components(xi), params)
    )


def field_second_apply(
    du: VectorField, xi: VectorField, tau: VectorField, params: HuberParams
) -> VectorField:
    check_same_grid(du, xi, tau)
    return split_components(
        du.grid,
        h_second_apply(pair_components(du), pair_components(xi), pair_components(tau), params),
    )


def field_prime_projected_apply(
    du: VectorField, q: VectorField, xi: VectorField, params: HuberParams
) -> VectorField:
    check_same_grid(du, q, xi)
    return split_components(
        du.grid,
        h_prime_projected_apply(
            pair_components(du), pair_components(q), pair_components(xi), params
        ),
    )
