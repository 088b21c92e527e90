"""
Oblique projections in the discrete H inner product.

P_F^G projects onto span(range_basis) along the M-orthogonal complement of
span(complement_basis). The feedback law uses the dual pair
P_{E_N}^{O_N^perp} and P_{O_N}^{E_N^perp}.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Tuple

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from errors import DirectSumError

logger = logging.getLogger(__name__)

MAX_GRAM_CONDITION = 1e12


@dataclass(frozen=True, eq=False)
class ObliqueProjector:
    range_basis: np.ndarray  # (n, k)
    complement_basis: np.ndarray  # (n, k)
    M: sp.spmatrix
    gram: np.ndarray  # complement^T M range
    condition: float

    @cached_property
    def _factor(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        q, r, piv = scipy.linalg.qr(self.gram, pivoting=True)
        return q, r, piv

    @property
    def rank(self) -> int:
        return self.range_basis.shape[1]

    def solve_gram(self, rhs: np.ndarray) -> np.ndarray:
        """G^{-1} rhs through the column-pivoted QR of the cross-Gram matrix."""
        q, r, piv = self._factor
        z = scipy.linalg.solve_triangular(r, q.T @ rhs)
        out = np.empty_like(z)
        out[piv] = z
        return out

    def coefficients(self, y: np.ndarray) -> np.ndarray:
        """Coordinates of P y in range_basis."""
        return self.solve_gram(self.complement_basis.T @ (self.M @ y))

    def apply(self, y: np.ndarray) -> np.ndarray:
        if self.rank == 0:
            return np.zeros_like(np.asarray(y, dtype=float))
        return self.range_basis @ self.coefficients(y)

    __call__ = apply


def make_projector(range_basis: np.ndarray, complement_basis: np.ndarray, M: sp.spmatrix) -> ObliqueProjector:
    range_basis = np.atleast_2d(np.asarray(range_basis, dtype=float))
    complement_basis = np.atleast_2d(np.asarray(complement_basis, dtype=float))
    if range_basis.shape != complement_basis.shape:
        raise DirectSumError(
            f"range and complement bases differ in shape: {range_basis.shape} vs {complement_basis.shape}",
            module="projections",
        )
    gram = complement_basis.T @ (M @ range_basis)
    condition, smallest = 1.0, 1.0
    if gram.size:
        # cosine-normalized so a tiny 1x1 Gram is not mistaken for a well-conditioned one
        with np.errstate(divide="ignore", invalid="ignore"):
            normalized = gram / np.outer(_m_norms(M, complement_basis), _m_norms(M, range_basis))
        if np.all(np.isfinite(normalized)):
            sv = np.linalg.svd(normalized, compute_uv=False)
            smallest = float(sv[-1])
            condition = float(sv[0] / sv[-1]) if sv[-1] > 0 else float("inf")
        else:
            condition = float("inf")
    if not np.isfinite(condition) or condition > MAX_GRAM_CONDITION or smallest < 1.0 / MAX_GRAM_CONDITION:
        raise DirectSumError(
            f"cross-Gram condition number {condition:.3e} exceeds {MAX_GRAM_CONDITION:.0e}; "
            "range and complement do not form a direct sum",
            module="projections",
        )
    logger.debug("oblique projector rank %d, cross-Gram condition %.3e", gram.shape[0], condition)
    return ObliqueProjector(range_basis, complement_basis, M, gram, condition)


def dual(P: ObliqueProjector) -> ObliqueProjector:
    """The M-adjoint projector: range and complement swapped."""
    return make_projector(P.complement_basis, P.range_basis, P.M)


def feedback_projectors(eigenfunctions: np.ndarray, indicators: np.ndarray, M: sp.spmatrix):
    """(P_E along O^perp, P_O along E^perp)."""
    P_E = make_projector(eigenfunctions, indicators, M)
    P_O = dual(P_E)
    logger.info("feedback projectors: %d modes, cross-Gram condition %.3e", P_E.rank, P_E.condition)
    return P_E, P_O


def theta_phi_split(P_E: ObliqueProjector, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=float)
    theta = P_E.apply(y)
    return theta, y - theta


def _random_vectors(n: int, count: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((n, count))


def _m_norms(M: sp.spmatrix, Y: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->j", Y, M @ Y))


def idempotence_residual(P: ObliqueProjector, n_vectors: int = 50, seed: int = 0) -> float:
    Y = _random_vectors(P.range_basis.shape[0], n_vectors, seed)
    PY = P.apply(Y)
    return float(np.max(_m_norms(P.M, P.apply(PY) - PY) / _m_norms(P.M, Y)))


def complement_residual(P: ObliqueProjector, n_vectors: int = 50, seed: int = 0) -> float:
    """(I - P) y lies in the kernel of P and is M-orthogonal to the complement basis."""
    Y = _random_vectors(P.range_basis.shape[0], n_vectors, seed)
    rest = Y - P.apply(Y)
    scale = _m_norms(P.M, Y)
    in_kernel = _m_norms(P.M, P.apply(rest)) / scale
    if P.rank == 0:
        return float(np.max(in_kernel))
    orth = np.abs(P.complement_basis.T @ (P.M @ rest)).max(axis=0) / (scale * _m_norms(P.M, P.complement_basis).max())
    return float(max(in_kernel.max(), orth.max()))


def adjoint_check(P: ObliqueProjector, n_pairs: int = 100, seed: int = 0) -> float:
    """max |(P u, v)_H - (u, P* v)_H| / (|u|_H |v|_H) with P* the dual projector."""
    adjoint = dual(P)
    n = P.range_basis.shape[0]
    U = _random_vectors(n, n_pairs, seed)
    V = _random_vectors(n, n_pairs, seed + 1)
    lhs = np.einsum("ij,ij->j", P.apply(U), P.M @ V)
    rhs = np.einsum("ij,ij->j", U, P.M @ adjoint.apply(V))
    scale = _m_norms(P.M, U) * _m_norms(P.M, V)
    return float(np.max(np.abs(lhs - rhs) / scale))
