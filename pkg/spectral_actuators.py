"""
Box actuators, the tensor sine eigenbasis, and the spectral gap beta_N.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.stats import linregress

from errors import ActuatorResolutionError, ConfigError, EigenSolverError
from mesh_fem import DENSE_EIGEN_LIMIT, DiscreteOperators, RectGrid, assemble, mass_matrix, unit_stiffness

logger = logging.getLogger(__name__)

Interval = Tuple[float, float]


@dataclass(frozen=True, eq=False)
class ActuatorSet:
    N: int
    r: float
    supports: Tuple[Tuple[Interval, ...], ...]
    indicators: np.ndarray  # (n_nodes, N_sigma)

    @property
    def N_sigma(self) -> int:
        return self.indicators.shape[1]


@dataclass(frozen=True, eq=False)
class EigenBasis:
    N: int
    multi_indices: Tuple[Tuple[int, ...], ...]
    functions: np.ndarray  # (n_nodes, N_sigma), M-orthonormal columns
    eigenvalues: np.ndarray  # continuous alpha_i
    discrete_eigenvalues: np.ndarray  # e_i^T A_0 e_i

    @property
    def N_sigma(self) -> int:
        return self.functions.shape[1]


@dataclass(frozen=True)
class SpectralGap:
    N: int
    beta_N: float
    c_beta_fit: Optional[float] = None


@dataclass(frozen=True)
class BetaScaling:
    exponent: float
    c_beta_fit: float
    r_squared: float
    c_beta_lower: float


def actuator_intervals(length: float, N: int, r: float) -> List[Interval]:
    half = r * length / (2.0 * N)
    centers = [(2 * i - 1) * length / (2.0 * N) for i in range(1, N + 1)]
    return [(c - half, c + half) for c in centers]


def build_actuators(grid: RectGrid, N: int, r: float = 0.5) -> ActuatorSet:
    """N^d box actuators; N = 0 gives the empty set."""
    if not 0.0 < r < 1.0:
        raise ConfigError(f"actuator ratio r must lie in (0, 1), got {r}", module="spectral_actuators")
    if N < 0:
        raise ConfigError(f"actuator count must be >= 0, got {N}", module="spectral_actuators")
    if N == 0:
        return ActuatorSet(N=0, r=r, supports=(), indicators=np.zeros((grid.n_nodes, 0)))

    per_dim = []
    for n in range(grid.d):
        width = r * grid.L[n] / N
        if width < 2.0 * grid.h[n] - 1e-12:
            raise ActuatorResolutionError(
                f"support width {width:.4g} in dimension {n} is narrower than 2h = {2 * grid.h[n]:.4g}",
                module="spectral_actuators",
            )
        per_dim.append(actuator_intervals(grid.L[n], N, r))

    supports = []
    columns = []
    for combo in itertools.product(range(N), repeat=grid.d):
        box = tuple(per_dim[n][i] for n, i in enumerate(combo))
        inside = np.ones(grid.n_nodes, dtype=bool)
        for n, (lo, hi) in enumerate(box):
            inside &= (grid.nodes[:, n] > lo) & (grid.nodes[:, n] < hi)
        if not inside.any():
            raise ActuatorResolutionError(f"actuator {combo} contains no grid node", module="spectral_actuators")
        supports.append(box)
        columns.append(inside.astype(float))
    return ActuatorSet(N=N, r=r, supports=tuple(supports), indicators=np.stack(columns, axis=1))


def build_eigenbasis(grid: RectGrid, N: int) -> EigenBasis:
    if N < 1:
        raise ConfigError(f"eigenbasis needs N >= 1, got {N}", module="spectral_actuators")
    for n in range(grid.d):
        if N > grid.n_cells[n] // 2:
            raise ConfigError(
                f"N = {N} modes are not resolved by {grid.n_cells[n]} cells in dimension {n}",
                module="spectral_actuators",
            )
    M = mass_matrix(grid)
    A0 = unit_stiffness(grid)
    indices = tuple(itertools.product(range(1, N + 1), repeat=grid.d))
    columns, alphas, discrete = [], [], []
    for index in indices:
        vec = np.ones(grid.n_nodes)
        for n, i in enumerate(index):
            vec *= np.sin(i * np.pi * grid.nodes[:, n] / grid.L[n])
        vec /= math.sqrt(float(vec @ (M @ vec)))
        columns.append(vec)
        alphas.append(sum((i * np.pi / grid.L[n]) ** 2 for n, i in enumerate(index)))
        discrete.append(float(vec @ (A0 @ vec)))
    return EigenBasis(
        N=N,
        multi_indices=indices,
        functions=np.stack(columns, axis=1),
        eigenvalues=np.array(alphas),
        discrete_eigenvalues=np.array(discrete),
    )


# --------- Spectral gap ---------------------------------------------------------

def _dense_constrained_minimum(A: sp.spmatrix, M: sp.spmatrix, X: np.ndarray) -> float:
    if X.shape[1]:
        Z = scipy.linalg.null_space(np.asarray((M @ X).T))
    else:
        Z = np.eye(A.shape[0])
    reduced_a = Z.T @ (A @ Z)
    reduced_m = Z.T @ (M @ Z)
    values = scipy.linalg.eigh(reduced_a, reduced_m, eigvals_only=True, subset_by_index=[0, 0])
    return float(values[0])


def _sparse_constrained_minimum(A: sp.spmatrix, M: sp.spmatrix, X: np.ndarray, maxiter: int) -> float:
    # Largest eigenvalue of the constrained inverse K M, K = A^-1 - W S^-1 W^T, W = A^-1 M X.
    n = A.shape[0]
    a_lu = spla.splu(A.tocsc())
    m_lu = spla.splu(M.tocsc())
    k = X.shape[1]
    if k:
        W = a_lu.solve(np.asarray(M @ X))
        schur = scipy.linalg.cho_factor(np.asarray((M @ X).T @ W))

    def kernel(v: np.ndarray) -> np.ndarray:
        out = a_lu.solve(v)
        if k:
            out = out - W @ scipy.linalg.cho_solve(schur, W.T @ v)
        return out

    op = spla.LinearOperator((n, n), matvec=lambda v: M @ kernel(M @ np.ravel(v)), dtype=float)
    m_inv = spla.LinearOperator((n, n), matvec=lambda v: m_lu.solve(np.ravel(v)), dtype=float)
    try:
        values = spla.eigsh(op, k=1, M=M.tocsc(), Minv=m_inv, which="LA", tol=1e-12, maxiter=maxiter,
                            return_eigenvectors=False)
    except spla.ArpackNoConvergence as exc:
        raise EigenSolverError("spectral gap eigen-solve did not converge", module="spectral_actuators") from exc
    return 1.0 / float(values[0])


def constrained_minimum(A: sp.spmatrix, M: sp.spmatrix, X: np.ndarray, maxiter: int = 5000) -> float:
    """Smallest eigenvalue of (A, M) on the M-orthogonal complement of span(X)."""
    if A.shape[0] <= DENSE_EIGEN_LIMIT:
        return _dense_constrained_minimum(A, M, X)
    return _sparse_constrained_minimum(A, M, X, maxiter)


def compute_beta(grid: RectGrid, ops: Optional[DiscreteOperators], act: ActuatorSet) -> SpectralGap:
    ops = ops or assemble(grid, None)
    beta = constrained_minimum(ops.A_0, ops.M, act.indicators)
    if beta <= 0:
        raise EigenSolverError(f"nonpositive spectral gap {beta:.6g}", module="spectral_actuators")
    logger.debug("beta_%d = %.6g (r=%.3g, grid %s)", act.N, beta, act.r, grid.n_cells)
    return SpectralGap(N=act.N, beta_N=beta, c_beta_fit=beta / act.N ** 2 if act.N else None)


def fit_beta_scaling(gaps: Sequence[SpectralGap], min_N: int = 1) -> BetaScaling:
    """Log-log fit beta_N ~ c_beta N^exponent over the gaps with N >= min_N.

    At small N the gap behaves like (N + offset)^2, which flattens a fit taken
    from N = 1; raise ``min_N`` to measure the asymptotic slope.
    """
    usable = [g for g in gaps if g.N >= max(min_N, 1)]
    if len(usable) < 2:
        raise ValueError(f"need at least two actuator counts N >= {max(min_N, 1)} to fit beta_N scaling")
    log_n = np.log([g.N for g in usable])
    log_b = np.log([g.beta_N for g in usable])
    fit = linregress(log_n, log_b)
    return BetaScaling(
        exponent=float(fit.slope),
        c_beta_fit=float(math.exp(fit.intercept)),
        r_squared=float(fit.rvalue ** 2),
        c_beta_lower=float(min(g.beta_N / g.N ** 2 for g in usable)),
    )


def beta_table(grid: RectGrid, N_values: Sequence[int], r: float = 0.5) -> List[SpectralGap]:
    ops = assemble(grid, None)
    gaps = [compute_beta(grid, ops, build_actuators(grid, N, r)) for N in N_values]
    if sum(1 for g in gaps if g.N >= 1) >= 2:
        scaling = fit_beta_scaling(gaps)
        gaps = [SpectralGap(N=g.N, beta_N=g.beta_N, c_beta_fit=scaling.c_beta_fit) for g in gaps]
        logger.info(
            "beta_N fit over N=%s: exponent %.3f, c_beta %.4g (R^2 %.4f)",
            list(N_values), scaling.exponent, scaling.c_beta_fit, scaling.r_squared,
        )
    return gaps


def beta_grid_convergence(grid: RectGrid, N: int, r: float = 0.5) -> Tuple[float, float, float]:
    """(beta on grid, beta on the half-resolution grid, relative change)."""
    fine = compute_beta(grid, None, build_actuators(grid, N, r)).beta_N
    coarse_grid = grid.coarsened()
    coarse = compute_beta(coarse_grid, None, build_actuators(coarse_grid, N, r)).beta_N
    change = abs(coarse - fine) / fine
    if change > 0.05:
        logger.warning("beta_%d changes by %.1f%% under coarsening; refine the grid", N, 100 * change)
    return fine, coarse, change
