"""
Q1 finite elements on rectangles with homogeneous Dirichlet boundary.

Provides the discrete H / V / V' geometry (mass and unit stiffness), the
random-diffusion stiffness, and the reaction/convection operators of the
weak form. Only interior nodes carry unknowns; node ordering is
lexicographic with the first coordinate slowest.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import TYPE_CHECKING, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from errors import ConfigError, GridError, LinearSolveError

if TYPE_CHECKING:  # pragma: no cover
    from random_fields import FieldRealization

logger = logging.getLogger(__name__)

MIN_CELLS = 4
DENSE_EIGEN_LIMIT = 2000


# --------- Grid ---------------------------------------------------------------

@dataclass(frozen=True)
class RectGrid:
    """Uniform tensor grid on D = (0, L_1) x ... x (0, L_d)."""

    d: int
    L: Tuple[float, ...]
    n_cells: Tuple[int, ...]

    @property
    def h(self) -> Tuple[float, ...]:
        return tuple(length / cells for length, cells in zip(self.L, self.n_cells))

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(cells - 1 for cells in self.n_cells)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    def axis_nodes(self, n: int) -> np.ndarray:
        return np.arange(1, self.n_cells[n]) * self.h[n]

    @cached_property
    def nodes(self) -> np.ndarray:
        axes = [self.axis_nodes(n) for n in range(self.d)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @cached_property
    def cell_midpoints(self) -> np.ndarray:
        axes = [(np.arange(self.n_cells[n]) + 0.5) * self.h[n] for n in range(self.d)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @cached_property
    def sample_points(self) -> np.ndarray:
        """Interior nodes followed by cell midpoints; sup/inf norms are taken here."""
        return np.vstack([self.nodes, self.cell_midpoints])

    def coarsened(self) -> "RectGrid":
        return build_grid(self.d, self.L, tuple(max(MIN_CELLS, c // 2) for c in self.n_cells))


def _as_tuple(value, d: int, cast) -> tuple:
    if isinstance(value, (int, float, np.integer, np.floating)):
        return tuple(cast(value) for _ in range(d))
    values = tuple(cast(v) for v in value)
    if len(values) != d:
        raise GridError(f"expected {d} entries, got {len(values)}", module="mesh_fem")
    return values


def build_grid(
    d: int,
    L: Union[float, Sequence[float]],
    n_cells: Union[int, Sequence[int]],
) -> RectGrid:
    if d not in (1, 2):
        raise GridError(f"dimension must be 1 or 2, got {d}", module="mesh_fem")
    lengths = _as_tuple(L, d, float)
    cells = _as_tuple(n_cells, d, int)
    if any(length <= 0 for length in lengths):
        raise GridError(f"lengths must be positive, got {lengths}", module="mesh_fem")
    if any(c < MIN_CELLS for c in cells):
        raise GridError(f"n_cells must be >= {MIN_CELLS} per dimension, got {cells}", module="mesh_fem")
    return RectGrid(d=d, L=lengths, n_cells=cells)


# --------- Coefficient forms --------------------------------------------------

@dataclass(frozen=True)
class ReactionForm:
    """a(t, x): constant, time_periodic (a0 + A sin wt) or space_cosine (a0 + A prod cos(pi x_n/L_n))."""

    kind: str = "constant"
    value: float = 0.0
    amplitude: float = 0.0
    frequency: float = 0.0

    def evaluate(self, t: float, points: np.ndarray, L: Sequence[float]) -> np.ndarray:
        base = np.full(points.shape[0], self.value, dtype=float)
        if self.kind == "constant":
            return base
        if self.kind == "time_periodic":
            return base + self.amplitude * math.sin(self.frequency * t)
        if self.kind == "space_cosine":
            profile = np.ones(points.shape[0])
            for n, length in enumerate(L):
                profile *= np.cos(np.pi * points[:, n] / length)
            return base + self.amplitude * profile
        raise ConfigError(f"unknown reaction kind: {self.kind}", module="mesh_fem")

    @property
    def autonomous(self) -> bool:
        return self.kind != "time_periodic" or self.amplitude == 0.0

    @property
    def is_zero(self) -> bool:
        return self.value == 0.0 and (self.kind == "constant" or self.amplitude == 0.0)

    def sup_abs(self) -> float:
        if self.kind == "constant":
            return abs(self.value)
        return abs(self.value) + abs(self.amplitude)

    def ess_inf(self) -> float:
        if self.kind == "constant":
            return self.value
        return self.value - abs(self.amplitude)


@dataclass(frozen=True)
class ConvectionForm:
    """b(t, x): zero, constant vector, or time_periodic vector * (1 + A sin wt)."""

    kind: str = "zero"
    vector: Tuple[float, ...] = ()
    amplitude: float = 0.0
    frequency: float = 0.0

    def evaluate(self, t: float, points: np.ndarray) -> np.ndarray:
        d = points.shape[1]
        if self.kind == "zero" or not self.vector:
            return np.zeros((points.shape[0], d))
        scale = 1.0
        if self.kind == "time_periodic":
            scale += self.amplitude * math.sin(self.frequency * t)
        vec = np.asarray(self.vector, dtype=float)[:d] * scale
        return np.tile(vec, (points.shape[0], 1))

    @property
    def autonomous(self) -> bool:
        return self.kind != "time_periodic" or self.amplitude == 0.0

    @property
    def is_zero(self) -> bool:
        return self.kind == "zero" or not any(self.vector)

    def sup_norm(self) -> float:
        if self.is_zero:
            return 0.0
        magnitude = float(np.linalg.norm(self.vector))
        if self.kind == "time_periodic":
            magnitude *= 1.0 + abs(self.amplitude)
        return magnitude


def nab_norm(reaction: ReactionForm, convection: ConvectionForm) -> float:
    """N(a, b) with the L^inf norm for a (bounded reaction)."""
    return reaction.sup_abs() + convection.sup_norm()


# --------- Element assembly ---------------------------------------------------

def _local_1d(h: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    stiff = np.array([[1.0, -1.0], [-1.0, 1.0]]) / h
    mass = np.array([[2.0, 1.0], [1.0, 2.0]]) * h / 6.0
    # grad[i, j] = integral of phi_j * dphi_i/dx over the cell
    grad = np.array([[-0.5, -0.5], [0.5, 0.5]])
    return stiff, mass, grad


def _tensor_element(grid: RectGrid, factors: Sequence[str]) -> np.ndarray:
    locals_ = [dict(zip(("stiff", "mass", "grad"), _local_1d(h))) for h in grid.h]
    element = np.ones((1, 1))
    for n, name in enumerate(factors):
        element = np.kron(element, locals_[n][name])
    return element


@lru_cache(maxsize=32)
def _connectivity(grid: RectGrid) -> Tuple[np.ndarray, np.ndarray]:
    """Full-grid node indices of each cell's 2^d vertices, and the interior node indices."""
    full_shape = tuple(c + 1 for c in grid.n_cells)
    cells = np.indices(grid.n_cells).reshape(grid.d, -1)
    vertices = []
    for offset in itertools.product((0, 1), repeat=grid.d):
        corner = cells + np.asarray(offset)[:, None]
        vertices.append(np.ravel_multi_index(tuple(corner), full_shape))
    interior = np.indices(grid.shape).reshape(grid.d, -1) + 1
    interior_index = np.ravel_multi_index(tuple(interior), full_shape)
    return np.stack(vertices, axis=1), interior_index


def _assemble(grid: RectGrid, element: np.ndarray, cell_weights: Optional[np.ndarray] = None) -> sp.csr_matrix:
    vertices, interior = _connectivity(grid)
    n_cells, n_local = vertices.shape
    weights = np.ones(n_cells) if cell_weights is None else np.asarray(cell_weights, dtype=float)
    rows = np.repeat(vertices, n_local, axis=1).ravel()
    cols = np.tile(vertices, (1, n_local)).ravel()
    data = (weights[:, None, None] * element[None, :, :]).ravel()
    n_full = int(np.prod([c + 1 for c in grid.n_cells]))
    full = sp.coo_matrix((data, (rows, cols)), shape=(n_full, n_full)).tocsr()
    return full[interior][:, interior].tocsr()


@lru_cache(maxsize=32)
def mass_matrix(grid: RectGrid) -> sp.csr_matrix:
    matrix = _assemble(grid, _tensor_element(grid, ["mass"] * grid.d))
    return ((matrix + matrix.T) * 0.5).tocsr()


def stiffness_matrix(grid: RectGrid, cell_values: Optional[np.ndarray] = None) -> sp.csr_matrix:
    element = np.zeros((2 ** grid.d, 2 ** grid.d))
    for n in range(grid.d):
        factors = ["stiff" if m == n else "mass" for m in range(grid.d)]
        element += _tensor_element(grid, factors)
    matrix = _assemble(grid, element, cell_values)
    return ((matrix + matrix.T) * 0.5).tocsr()


@lru_cache(maxsize=32)
def unit_stiffness(grid: RectGrid) -> sp.csr_matrix:
    return stiffness_matrix(grid, None)


@lru_cache(maxsize=32)
def _gradient_matrices(grid: RectGrid) -> Tuple[sp.csr_matrix, ...]:
    out = []
    for n in range(grid.d):
        factors = ["grad" if m == n else "mass" for m in range(grid.d)]
        out.append(_assemble(grid, _tensor_element(grid, factors)))
    return tuple(out)


def reaction_matrix(grid: RectGrid, reaction: ReactionForm, t: float) -> sp.csr_matrix:
    """Nodal quadrature of the integral of a*y*phi."""
    if reaction.is_zero:
        return sp.csr_matrix((grid.n_nodes, grid.n_nodes))
    values = reaction.evaluate(t, grid.nodes, grid.L) * grid.cell_volume
    return sp.diags(values, format="csr")


def convection_matrix(grid: RectGrid, convection: ConvectionForm, t: float) -> sp.csr_matrix:
    """B with B_ij = -sum_n b_n(x_j) * integral of phi_j d_n phi_i."""
    if convection.is_zero:
        return sp.csr_matrix((grid.n_nodes, grid.n_nodes))
    b = convection.evaluate(t, grid.nodes)
    matrix = sp.csr_matrix((grid.n_nodes, grid.n_nodes))
    for n, gradient in enumerate(_gradient_matrices(grid)):
        matrix = matrix - gradient @ sp.diags(b[:, n])
    return matrix.tocsr()


# --------- Operators ----------------------------------------------------------

@dataclass(frozen=True)
class DiscreteOperators:
    M: sp.csr_matrix
    A_nu: sp.csr_matrix
    A_0: sp.csr_matrix
    R: sp.csr_matrix
    B: sp.csr_matrix

    @property
    def n(self) -> int:
        return self.M.shape[0]

    @property
    def K(self) -> sp.csr_matrix:
        """Full spatial operator A_nu + R + B of the state equation."""
        return (self.A_nu + self.R + self.B).tocsr()

    @cached_property
    def a0_lu(self):
        return spla.splu(self.A_0.tocsc())

    def solve_a0(self, rhs: np.ndarray) -> np.ndarray:
        try:
            return self.a0_lu.solve(np.asarray(rhs, dtype=float))
        except RuntimeError as exc:
            raise LinearSolveError("unit stiffness solve failed", module="mesh_fem") from exc


def assemble(
    grid: RectGrid,
    nu: Optional["FieldRealization"],
    reaction: Optional[ReactionForm] = None,
    convection: Optional[ConvectionForm] = None,
    t: float = 0.0,
) -> DiscreteOperators:
    """Assemble every operator of the weak form at time t; nu=None means unit diffusion."""
    reaction = reaction or ReactionForm()
    convection = convection or ConvectionForm()
    a0 = unit_stiffness(grid)
    a_nu = a0 if nu is None else stiffness_matrix(grid, nu.nu_cells)
    return DiscreteOperators(
        M=mass_matrix(grid),
        A_nu=a_nu,
        A_0=a0,
        R=reaction_matrix(grid, reaction, t),
        B=convection_matrix(grid, convection, t),
    )


def norms(ops: DiscreteOperators, y: np.ndarray) -> Tuple[float, float, float]:
    """(||y||_H, ||y||_V, ||y||_V') with y seen as the functional M y."""
    y = np.asarray(y, dtype=float)
    my = ops.M @ y
    h2 = float(y @ my)
    v2 = float(y @ (ops.A_0 @ y))
    dual2 = float(my @ ops.solve_a0(my)) if np.any(my) else 0.0
    return math.sqrt(max(h2, 0.0)), math.sqrt(max(v2, 0.0)), math.sqrt(max(dual2, 0.0))


def load_dual_norm(ops: DiscreteOperators, f: np.ndarray) -> float:
    f = np.asarray(f, dtype=float)
    if not np.any(f):
        return 0.0
    return math.sqrt(max(float(f @ ops.solve_a0(f)), 0.0))


def squared_norms(ops: DiscreteOperators, states: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Row-wise ||y||_H^2 and ||y||_V^2 for a stack of states (..., n)."""
    flat = states.reshape(-1, states.shape[-1])
    h2 = np.einsum("ij,ij->i", flat, (ops.M @ flat.T).T)
    v2 = np.einsum("ij,ij->i", flat, (ops.A_0 @ flat.T).T)
    return h2.reshape(states.shape[:-1]), v2.reshape(states.shape[:-1])


def smallest_generalized_eigenvalue(A: sp.spmatrix, M: sp.spmatrix) -> float:
    if A.shape[0] <= DENSE_EIGEN_LIMIT:
        values = scipy.linalg.eigh(A.toarray(), M.toarray(), eigvals_only=True, subset_by_index=[0, 0])
        return float(values[0])
    values = spla.eigsh(A.tocsc(), k=1, M=M.tocsc(), sigma=0.0, which="LM", return_eigenvectors=False)
    return float(values[0])


def first_eigenvalue(grid: RectGrid) -> float:
    return smallest_generalized_eigenvalue(unit_stiffness(grid), mass_matrix(grid))
