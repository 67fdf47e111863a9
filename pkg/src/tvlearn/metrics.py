"""Image-quality and diagnostic measures.

SSIM follows the standard parameterization (11x11 Gaussian window with
sigma 1.5, K1=0.01, K2=0.03) on the [0,1] intensity scale, averaging the
local index over all fully-interior window positions.
"""

from __future__ import annotations

import numpy as np
from scipy.signal import convolve2d

from .grid import ScalarField, check_same_grid
from .system import ModelParams, OptState, ProblemData, residual

_WINDOW = 11
_SIGMA = 1.5
_C1 = 0.01 ** 2
_C2 = 0.03 ** 2


def _gaussian_window() -> np.ndarray:
    half = (_WINDOW - 1) / 2.0
    x = np.arange(_WINDOW) - half
    g = np.exp(-0.5 * (x / _SIGMA) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


_KERNEL = _gaussian_window()


def ssim(a: ScalarField, b: ScalarField) -> float:
    """Mean structural similarity between two fields on the same grid.

    The mean runs over 'valid' window placements only, so both dimensions
    must be at least 11 nodes.
    """
    check_same_grid(a, b)
    m, l = a.grid.shape
    if m < _WINDOW or l < _WINDOW:
        raise ValueError(
            f"ssim needs at least {_WINDOW}x{_WINDOW} nodes, got {m}x{l}"
        )
    x = a.values
    y = b.values
    mu_x = convolve2d(x, _KERNEL, mode="valid")
    mu_y = convolve2d(y, _KERNEL, mode="valid")
    xx = convolve2d(x * x, _KERNEL, mode="valid") - mu_x * mu_x
    yy = convolve2d(y * y, _KERNEL, mode="valid") - mu_y * mu_y
    xy = convolve2d(x * y, _KERNEL, mode="valid") - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + _C1) * (2.0 * xy + _C2)
    den = (mu_x * mu_x + mu_y * mu_y + _C1) * (xx + yy + _C2)
    return float(np.mean(num / den))


def psnr(a: ScalarField, b: ScalarField) -> float:
    """Peak signal-to-noise ratio in dB for unit dynamic range; identical
    inputs give +inf."""
    check_same_grid(a, b)
    mse = float(np.mean((a.values - b.values) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def field_error(a, b) -> float:
    """Euclidean norm of the difference between two same-shaped fields."""
    check_same_grid(a, b)
    return float(np.linalg.norm(a.flat() - b.flat()))


def _window_rows(layout) -> list:
    wins = getattr(layout, "windows", layout)
    return list(wins)


def ssnr_metric(y: OptState, data: ProblemData, params: ModelParams, layout) -> float:
    """Sum over subdomain windows of the window-restricted residual norm.

    The layout is a sequence of (start, width) row windows along axis 0 (or
    an object exposing it as .windows).  Overlap rows are counted once per
    window that contains them, so with a single window the value equals the
    global residual norm.
    """
    res = residual(y, data, params)
    total = 0.0
    for start, width in _window_rows(layout):
        stop = start + width
        parts = []
        for k in range(res.n_train):
            parts.append(res.u[k].values[start:stop, :].ravel(order="F"))
            parts.append(res.q[k].comp1[start : stop - 1, :].ravel(order="F"))
            parts.append(res.q[k].comp2[start:stop, :].ravel(order="F"))
            parts.append(res.p[k].values[start:stop, :].ravel(order="F"))
            parts.append(res.z[k].comp1[start : stop - 1, :].ravel(order="F"))
            parts.append(res.z[k].comp2[start:stop, :].ravel(order="F"))
        parts.append(res.lam.values[start:stop, :].ravel(order="F"))
        total += float(np.linalg.norm(np.concatenate(parts)))
    return total
