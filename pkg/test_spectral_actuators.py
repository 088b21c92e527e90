import math

import numpy as np
import pytest

from errors import ActuatorResolutionError, ConfigError
from mesh_fem import assemble, build_grid, first_eigenvalue, mass_matrix, unit_stiffness
from spectral_actuators import (
    SpectralGap,
    _dense_constrained_minimum,
    _sparse_constrained_minimum,
    actuator_intervals,
    beta_grid_convergence,
    beta_table,
    build_actuators,
    build_eigenbasis,
    compute_beta,
    fit_beta_scaling,
)


def test_actuator_intervals_are_centered_in_subintervals():
    intervals = actuator_intervals(1.0, 2, 0.5)
    np.testing.assert_allclose(intervals, [(0.125, 0.375), (0.625, 0.875)])


def test_actuators_2d_are_disjoint_boxes():
    grid = build_grid(2, 1.0, 16)
    act = build_actuators(grid, 2, 0.5)
    assert act.N_sigma == 4
    assert len(act.supports) == 4
    assert act.indicators.sum(axis=1).max() == 1.0
    assert np.all(act.indicators.sum(axis=0) > 0)


def test_no_actuators():
    act = build_actuators(build_grid(1, 1.0, 8), 0)
    assert act.N_sigma == 0
    assert act.indicators.shape == (7, 0)


def test_underresolved_actuators_rejected():
    with pytest.raises(ActuatorResolutionError):
        build_actuators(build_grid(1, 1.0, 8), 4, 0.5)


@pytest.mark.parametrize("r, N", [(0.0, 2), (1.0, 2), (0.5, -1)])
def test_bad_actuator_parameters(r, N):
    with pytest.raises(ConfigError):
        build_actuators(build_grid(1, 1.0, 16), N, r)


@pytest.mark.parametrize("d, cells", [(1, 64), (2, 16)])
def test_eigenbasis_is_mass_orthonormal(d, cells):
    grid = build_grid(d, 1.0, cells)
    basis = build_eigenbasis(grid, 3)
    assert basis.N_sigma == 3 ** d
    E = basis.functions
    np.testing.assert_allclose(E.T @ (mass_matrix(grid) @ E), np.eye(basis.N_sigma), atol=1e-10)


def test_eigenbasis_eigenvalues():
    grid = build_grid(1, 1.0, 128)
    basis = build_eigenbasis(grid, 3)
    np.testing.assert_allclose(basis.eigenvalues, [(k * math.pi) ** 2 for k in (1, 2, 3)])
    np.testing.assert_allclose(basis.discrete_eigenvalues, basis.eigenvalues, rtol=1e-3)


def test_eigenbasis_rejects_unresolved_modes():
    with pytest.raises(ConfigError):
        build_eigenbasis(build_grid(1, 1.0, 8), 5)
    with pytest.raises(ConfigError):
        build_eigenbasis(build_grid(1, 1.0, 8), 0)


def test_beta_without_actuators_is_first_eigenvalue():
    grid = build_grid(1, 1.0, 32)
    gap = compute_beta(grid, None, build_actuators(grid, 0))
    assert gap.beta_N == pytest.approx(first_eigenvalue(grid), rel=1e-10)
    assert gap.c_beta_fit is None


def test_beta_grows_with_actuator_count():
    grid = build_grid(1, 1.0, 128)
    gaps = beta_table(grid, [1, 2, 3, 4, 5, 6])
    betas = [g.beta_N for g in gaps]
    assert all(b > a for a, b in zip(betas, betas[1:]))
    assert betas[0] > first_eigenvalue(grid)
    scaling = fit_beta_scaling(gaps)
    # the offset in (N + c)^2 keeps the fit from N = 1 well below 2
    assert 1.0 < scaling.exponent < 2.0
    assert scaling.c_beta_lower <= scaling.c_beta_fit * 1.5
    assert all(g.c_beta_fit == pytest.approx(scaling.c_beta_fit) for g in gaps)


@pytest.mark.slow
def test_beta_scaling_is_quadratic_for_large_n_1d():
    gaps = beta_table(build_grid(1, 1.0, 513), range(1, 9))
    assert fit_beta_scaling(gaps, min_N=4).exponent >= 1.8
    assert fit_beta_scaling(gaps, min_N=4).exponent > fit_beta_scaling(gaps).exponent


@pytest.mark.slow
def test_beta_scaling_steepens_with_n_2d():
    grid = build_grid(2, 1.0, 64)
    gaps = beta_table(grid, range(1, 6))
    betas = np.array([g.beta_N for g in gaps])
    assert np.all(np.diff(betas) > 0)
    assert betas[0] > first_eigenvalue(grid)
    local = np.diff(np.log(betas)) / np.diff(np.log(np.arange(1, 6)))
    assert np.all(local > 0)
    assert local[-1] > fit_beta_scaling(gaps).exponent
    assert fit_beta_scaling(gaps, min_N=3).exponent <= 2.2


def test_scaling_fit_window():
    gaps = [SpectralGap(N, 9.0 * (N + 1.0) ** 2) for N in range(1, 9)]
    full, tail = fit_beta_scaling(gaps), fit_beta_scaling(gaps, min_N=5)
    assert full.exponent < tail.exponent < 2.0
    with pytest.raises(ValueError):
        fit_beta_scaling(gaps, min_N=8)


def test_scaling_fit_needs_two_points():
    grid = build_grid(1, 1.0, 32)
    with pytest.raises(ValueError):
        fit_beta_scaling(beta_table(grid, [2]))


def test_sparse_and_dense_constrained_minimum_agree():
    grid = build_grid(1, 1.0, 64)
    X = build_actuators(grid, 2).indicators
    A, M = unit_stiffness(grid), mass_matrix(grid)
    dense = _dense_constrained_minimum(A, M, X)
    sparse = _sparse_constrained_minimum(A, M, X, maxiter=5000)
    assert sparse == pytest.approx(dense, rel=1e-6)


def test_constrained_minimizer_is_orthogonal_to_actuators():
    # the minimum over the constrained space is at least the unconstrained one
    grid = build_grid(2, 1.0, 12)
    ops = assemble(grid, None)
    gap = compute_beta(grid, ops, build_actuators(grid, 2))
    assert gap.beta_N > first_eigenvalue(grid)


def test_beta_is_grid_converged():
    fine, coarse, change = beta_grid_convergence(build_grid(1, 1.0, 128), 2)
    assert change < 0.05
    assert fine > 0 and coarse > 0
