"""Staggered finite-difference calculus on the pixel grid.

The image lives on the node grid of the rectangle [0,(m-1)h] x [0,(l-1)h]:
``m`` nodes along the first axis (index i), ``l`` along the second (index j).
Gradients are forward differences and land on two staggered grids, one per
component; divergences are backward differences with zero normal flux at the
outer boundary, which makes the discrete divergence the exact negative
adjoint of the discrete gradient.  The five-point Laplacian takes its ghost
values either from symmetric reflection about the boundary node (homogeneous
Neumann) or as zeros (homogeneous Dirichlet).

Flat vectors use the layout (i, j) -> i + j*m throughout the package, i.e.
``ravel(order='F')`` on arrays indexed ``[i, j]``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class BoundaryKind(enum.Enum):
    """Ghost-value rule for the five-point Laplacian."""

    NEUMANN_REFLECT = "neumann-reflect"
    DIRICHLET_ZERO = "dirichlet-zero"


@dataclass(frozen=True)
class GridSpec:
    """Node grid with ``m`` x ``l`` pixels and mesh step ``h``."""

    m: int
    l: int
    h: float

    def __post_init__(self):
        if self.m < 2 or self.l < 2:
            raise ValueError(f"grid must be at least 2x2, got {self.m}x{self.l}")
        if not self.h > 0:
            raise ValueError(f"mesh step must be positive, got {self.h}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.m, self.l)

    @property
    def n_nodes(self) -> int:
        return self.m * self.l

    @property
    def extent(self) -> tuple[float, float]:
        """Side lengths of the covered rectangle."""
        return ((self.m - 1) * self.h, (self.l - 1) * self.h)


def _as_values(grid: GridSpec, values) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.shape != grid.shape:
        raise ValueError(f"expected {grid.shape} values, got {arr.shape}")
    return arr


@dataclass
class ScalarField:
    """Node-centered real field on the grid.

    ``values[i, j]`` is the value at node (i*h, j*h).  Treated as immutable
    after construction; operators always return new fields.
    """

    grid: GridSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.values = _as_values(self.grid, self.values)

    @classmethod
    def full(cls, grid: GridSpec, value: float) -> "ScalarField":
        return cls(grid, np.full(grid.shape, float(value)))

    @classmethod
    def zeros(cls, grid: GridSpec) -> "ScalarField":
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def from_flat(cls, grid: GridSpec, flat: np.ndarray) -> "ScalarField":
        return cls(grid, np.asarray(flat, dtype=float).reshape(grid.shape, order="F"))

    def flat(self) -> np.ndarray:
        """Flatten in the canonical (i, j) -> i + j*m layout."""
        return self.values.ravel(order="F")

    def copy(self) -> "ScalarField":
        return ScalarField(self.grid, self.values.copy())


@dataclass
class VectorField:
    """Staggered two-component field.

    ``comp1`` holds first-axis values on the (m-1) x l staggered grid,
    ``comp2`` second-axis values on m x (l-1); forward differences of a
    node field land exactly on these positions.
    """

    grid: GridSpec
    comp1: np.ndarray = field(repr=False)
    comp2: np.ndarray = field(repr=False)

    def __post_init__(self):
        m, l = self.grid.shape
        self.comp1 = np.asarray(self.comp1, dtype=float)
        self.comp2 = np.asarray(self.comp2, dtype=float)
        if self.comp1.shape != (m - 1, l):
            raise ValueError(f"comp1 must be {(m - 1, l)}, got {self.comp1.shape}")
        if self.comp2.shape != (m, l - 1):
            raise ValueError(f"comp2 must be {(m, l - 1)}, got {self.comp2.shape}")

    @classmethod
    def zeros(cls, grid: GridSpec) -> "VectorField":
        m, l = grid.shape
        return cls(grid, np.zeros((m - 1, l)), np.zeros((m, l - 1)))

    @classmethod
    def from_flat(cls, grid: GridSpec, flat: np.ndarray) -> "VectorField":
        m, l = grid.shape
        n1 = (m - 1) * l
        flat = np.asarray(flat, dtype=float)
        return cls(
            grid,
            flat[:n1].reshape((m - 1, l), order="F"),
            flat[n1:].reshape((m, l - 1), order="F"),
        )

    def flat(self) -> np.ndarray:
        """comp1 then comp2, each in the canonical staggered layout."""
        return np.concatenate([self.comp1.ravel(order="F"), self.comp2.ravel(order="F")])

    def copy(self) -> "VectorField":
        return VectorField(self.grid, self.comp1.copy(), self.comp2.copy())


def check_same_grid(*fields) -> GridSpec:
    grid = fields[0].grid
    for f in fields[1:]:
        if f.grid != grid:
            raise ValueError(f"grid mismatch: {f.grid} vs {grid}")
    return grid


def gradient(v: ScalarField) -> VectorField:
    """Forward-difference gradient onto the staggered grids."""
    h = v.grid.h
    vals = v.values
    return VectorField(
        v.grid,
        (vals[1:, :] - vals[:-1, :]) / h,
        (vals[:, 1:] - vals[:, :-1]) / h,
    )


def divergence(q: VectorField) -> ScalarField:
    """Backward-difference divergence with zero flux past the boundary.

    Out-of-range staggered entries count as zero, so the identity
    <gradient(v), q> = -<v, divergence(q)> holds exactly.
    """
    m, l = q.grid.shape
    h = q.grid.h
    out = np.zeros((m, l))
    out[: m - 1, :] += q.comp1
    out[1:, :] -= q.comp1
    out[:, : l - 1] += q.comp2
    out[:, 1:] -= q.comp2
    return ScalarField(q.grid, out / h)


def laplacian(v: ScalarField, bc: BoundaryKind = BoundaryKind.NEUMANN_REFLECT) -> ScalarField:
    """Five-point Laplacian with ghost values chosen by ``bc``.

    NEUMANN_REFLECT mirrors across the boundary node (the ghost equals the
    first interior neighbor), so constants are annihilated exactly;
    DIRICHLET_ZERO uses zero ghosts.
    """
    if bc is BoundaryKind.NEUMANN_REFLECT:
        padded = np.pad(v.values, 1, mode="reflect")
    elif bc is BoundaryKind.DIRICHLET_ZERO:
        padded = np.pad(v.values, 1, mode="constant")
    else:  # pragma: no cover - exhaustive enum
        raise ValueError(f"unknown boundary kind {bc}")
    core = padded[1:-1, 1:-1]
    acc = padded[:-2, 1:-1] + padded[2:, 1:-1] + padded[1:-1, :-2] + padded[1:-1, 2:] - 4.0 * core
    return ScalarField(v.grid, acc / v.grid.h**2)


def inner(a, b) -> float:
    """Euclidean inner product of two like-shaped fields."""
    if isinstance(a, ScalarField) and isinstance(b, ScalarField):
        check_same_grid(a, b)
        return float(np.vdot(a.values, b.values))
    if isinstance(a, VectorField) and isinstance(b, VectorField):
        check_same_grid(a, b)
        return float(np.vdot(a.comp1, b.comp1) + np.vdot(a.comp2, b.comp2))
    raise TypeError(f"cannot pair {type(a).__name__} with {type(b).__name__}")


def norm(a) -> float:
    """Euclidean norm of a field."""
    return float(np.sqrt(inner(a, a)))
