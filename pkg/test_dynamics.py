import logging
import math

import numpy as np
import pytest

from dynamics import (
    EnsembleStepper,
    FeedbackGain,
    TimeGrid,
    build_setup,
    calibrate_embedding_constant,
    check_energy_observability,
    feedback_control,
    feedback_matrix,
    fit_exponential,
    select_gain,
    simulate,
    solve_closed_loop,
    stable_regime_margin,
    step_implicit,
)
from errors import ConfigError, InsufficientActuatorsError
from mesh_fem import ReactionForm, assemble, build_grid
from random_fields import (
    InitialStateSpec,
    LogNormalField,
    SpatialFunction,
    UniformAffineField,
    build_ensemble,
    build_initial_states,
    realize,
    sample,
)
from spectral_actuators import SpectralGap, beta_table, build_actuators

UNIT = UniformAffineField(nu0=SpatialFunction(value=1.0), psi=(), kappa=1.0)


def _first_mode(grid):
    return np.sin(np.pi * grid.nodes[:, 0])


def _discrete_eigenvalue(ops, y):
    return (y @ ops.A_0 @ y) / (y @ ops.M @ y)


# --------- Single steps ---------------------------------------------------------

def test_implicit_step_on_the_first_mode():
    grid = build_grid(1, 1.0, 32)
    nu = realize(UNIT, sample(UNIT, 0), grid)
    ops = assemble(grid, nu)
    y = _first_mode(grid)
    dt = 0.01
    y_next = step_implicit(ops, y, None, build_actuators(grid, 0), dt)
    np.testing.assert_allclose(y_next, y / (1 + dt * _discrete_eigenvalue(ops, y)), atol=1e-12)


def test_crank_nicolson_on_the_first_mode():
    grid = build_grid(1, 1.0, 32)
    spec = LogNormalField(psi=(SpatialFunction(value=0.0),))
    setup = build_setup(build_ensemble(spec, grid, 1, 0), build_actuators(grid, 0), scheme="crank_nicolson")
    dt = 0.05
    y = _first_mode(grid)
    lam = _discrete_eigenvalue(assemble(grid, None), y)
    traj = simulate(y, setup, TimeGrid(0.0, dt, 4))
    factor = (1 - 0.5 * dt * lam) / (1 + 0.5 * dt * lam)
    np.testing.assert_allclose(traj.states[0, -1], factor ** 4 * y, atol=1e-12)


def test_stepper_matches_step_implicit(make_setup):
    setup = make_setup(n_cells=16, S=2, N=2, reaction=-2.0)
    stepper = EnsembleStepper(setup, 0.01)
    y = np.random.default_rng(0).standard_normal(setup.grid.n_nodes)
    u = np.array([0.3, -1.0])
    ops = setup.operators(1, 0.01)
    expected = step_implicit(ops, y, u, setup.actuators, 0.01)
    np.testing.assert_allclose(stepper.step(1, y, u, 0.0), expected, atol=1e-12)


# --------- Feedback -------------------------------------------------------------

def _gain(lam=2.0, N=2):
    return FeedbackGain(lam=lam, mu=1.0, N_star=N, lambda_star=lam)


def test_feedback_dissipation_identity(make_setup):
    setup = make_setup(n_cells=32, S=1, N=2)
    lam = 2.0
    F = feedback_matrix(setup, _gain(lam))
    rng = np.random.default_rng(1)
    for _ in range(5):
        y = rng.standard_normal(setup.grid.n_nodes)
        u = F @ y
        theta = setup.P_E.apply(y)
        lhs = (setup.MX @ u) @ y
        rhs = -lam * (theta @ setup.A_0 @ theta)
        assert lhs == pytest.approx(rhs, rel=1e-9)


def test_feedback_matrix_matches_feedback_control(make_setup):
    setup = make_setup(n_cells=32, S=1, N=2)
    gain = _gain(3.0)
    F = feedback_matrix(setup, gain)
    y = np.random.default_rng(2).standard_normal(setup.grid.n_nodes)
    ops = setup.operators(0, 0.0)
    np.testing.assert_allclose(F @ y, feedback_control(setup.P_E, setup.P_O, ops, gain, y), atol=1e-10)


def test_feedback_vanishes_without_gain_or_actuators(make_setup):
    setup = make_setup(n_cells=16, S=1, N=2)
    assert not np.any(feedback_matrix(setup, _gain(0.0)))
    empty = make_setup(n_cells=16, S=1, N=0)
    assert feedback_matrix(empty, _gain(1.0)).shape == (0, 15)


def test_explicit_coupling_is_the_default(make_setup):
    assert make_setup().coupling == "explicit"


def test_woodbury_step_matches_dense_solve(make_setup):
    setup = make_setup(n_cells=16, S=2, N=2, reaction=-3.0, coupling="implicit")
    dt = 0.02
    F = feedback_matrix(setup, _gain(2.5))
    stepper = EnsembleStepper(setup, dt, F)
    y = np.random.default_rng(3).standard_normal(setup.grid.n_nodes)
    for s in range(2):
        y_next, u = stepper.closed_step(s, y, 0.0)
        system = (setup.M + dt * stepper.operator(s, dt)).toarray() - dt * setup.MX @ F
        expected = np.linalg.solve(system, setup.M @ y)
        np.testing.assert_allclose(y_next, expected, atol=1e-10)
        np.testing.assert_allclose(u, F @ y_next)


def test_crank_nicolson_weights_the_implicit_feedback(make_setup):
    setup = make_setup(n_cells=16, S=1, N=2, reaction=-3.0, scheme="crank_nicolson", coupling="implicit")
    dt = 0.02
    F = feedback_matrix(setup, _gain(2.5))
    stepper = EnsembleStepper(setup, dt, F)
    y = np.random.default_rng(6).standard_normal(setup.grid.n_nodes)
    y_next, u = stepper.closed_step(0, y, 0.0)

    A = stepper.operator(0, 0.0).toarray()
    M, MX = setup.M.toarray(), setup.MX
    lhs = M + 0.5 * dt * A - 0.5 * dt * MX @ F
    rhs = (M - 0.5 * dt * A + 0.5 * dt * MX @ F) @ y
    np.testing.assert_allclose(y_next, np.linalg.solve(lhs, rhs), atol=1e-10)
    np.testing.assert_allclose(u, 0.5 * F @ (y + y_next), rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(stepper.step(0, y, u, 0.0), y_next, atol=1e-10)


def test_explicit_coupling_uses_the_current_state(make_setup):
    setup = make_setup(n_cells=16, S=1, N=2, coupling="explicit")
    F = feedback_matrix(setup, _gain(2.0))
    stepper = EnsembleStepper(setup, 0.01, F)
    y = np.random.default_rng(4).standard_normal(setup.grid.n_nodes)
    y_next, u = stepper.closed_step(0, y, 0.0)
    np.testing.assert_allclose(u, F @ y)
    np.testing.assert_allclose(y_next, stepper.step(0, y, F @ y, 0.0))


def test_unknown_scheme_and_coupling(make_setup):
    with pytest.raises(ConfigError):
        make_setup(scheme="rk4")
    with pytest.raises(ConfigError):
        make_setup(coupling="sideways")


# --------- Gain selection -------------------------------------------------------

TABLE = [SpectralGap(1, 20.0), SpectralGap(2, 40.0), SpectralGap(3, 90.0)]


def test_bounded_reaction_gain():
    gain = select_gain(0.5, 1.5, 4.0, 1.0, 0.0, math.pi ** 2, TABLE, variant="bounded_reaction")
    # threshold (4 mu + 3 ||a||) / nu_lower = 32
    assert gain.beta_threshold == pytest.approx(32.0)
    assert gain.N_star == 2
    assert gain.lambda_star == pytest.approx(14.0 / math.pi ** 2 + 1.5)
    assert gain.lam == gain.lambda_star
    assert gain.theta_theta == pytest.approx(4.0)


def test_general_gain():
    c, Nab, nu_lo, nu_hi, mu = 0.5, 2.0, 0.5, 1.5, 1.0
    gain = select_gain(nu_lo, nu_hi, Nab, mu, c, math.pi ** 2, TABLE, variant="general")
    coupling = 3 * (c * Nab) ** 2
    assert gain.beta_threshold == pytest.approx((2 / nu_lo) * (4 * mu + coupling / (2 * nu_lo)))
    assert gain.N_star == 2
    assert gain.theta_theta == pytest.approx(4 * mu)
    assert gain.theta_phi > 0


def test_no_admissible_actuator_count():
    with pytest.raises(InsufficientActuatorsError):
        select_gain(0.5, 1.5, 40.0, 1.0, 0.0, math.pi ** 2, TABLE, variant="bounded_reaction")


def test_gain_below_lambda_star_warns(caplog):
    with caplog.at_level(logging.WARNING, logger="dynamics"):
        gain = select_gain(0.5, 1.5, 4.0, 1.0, 0.0, math.pi ** 2, TABLE, variant="bounded_reaction", lam=0.1)
    assert gain.lam == 0.1
    assert "below lambda*" in caplog.text


def test_gain_selection_rejects_bad_inputs():
    with pytest.raises(ConfigError):
        select_gain(0.0, 1.0, 1.0, 1.0, 0.0, 1.0, TABLE)
    with pytest.raises(ConfigError):
        select_gain(0.5, 1.0, 1.0, 1.0, 0.0, 1.0, TABLE, variant="optimistic")
    with pytest.raises(ConfigError):
        FeedbackGain(lam=-1.0, mu=1.0, N_star=1, lambda_star=1.0)


# --------- Ensemble runs --------------------------------------------------------

def _unstable_closed_loop(uniform_spec, coupling="explicit", dt=0.002):
    grid = build_grid(1, 1.0, 32)
    ensemble = build_ensemble(uniform_spec, grid, 4, 21)
    reaction = ReactionForm(value=-12.0)
    nu_lower, nu_upper = ensemble.bracket()
    probe = build_setup(ensemble, build_actuators(grid, 0), reaction)
    gain = select_gain(nu_lower, nu_upper, 12.0, 1.0, 0.0, probe.alpha1,
                       beta_table(grid, [1, 2, 3, 4]), variant="bounded_reaction")
    setup = build_setup(ensemble, build_actuators(grid, gain.N_star), reaction, coupling=coupling)
    y0 = build_initial_states(grid, InitialStateSpec(noise=0.5), ensemble)
    tgrid = TimeGrid.over(0.0, 1.0, dt)
    return setup, gain, y0, tgrid


@pytest.mark.parametrize("coupling, dt", [("explicit", 0.002), ("implicit", 0.01)])
def test_closed_loop_decays_monotonically(uniform_spec, coupling, dt):
    setup, gain, y0, tgrid = _unstable_closed_loop(uniform_spec, coupling, dt)
    assert stable_regime_margin(setup.ensemble, setup.reaction) < 0
    traj = solve_closed_loop(y0, setup, gain, tgrid)
    assert traj.energy_violations == 0
    assert traj.decay().rate >= 0.9 * gain.mu
    assert traj.controls.shape == (4, tgrid.n_steps, gain.N_star)

    free = simulate(y0, setup, tgrid)
    assert free.E_H2[-1] > traj.E_H2[-1]


def test_worker_count_does_not_change_results(uniform_spec):
    setup, gain, y0, tgrid = _unstable_closed_loop(uniform_spec)
    serial = solve_closed_loop(y0, setup, gain, tgrid, workers=1)
    threaded = solve_closed_loop(y0, setup, gain, tgrid, workers=3)
    np.testing.assert_array_equal(serial.states, threaded.states)
    np.testing.assert_array_equal(serial.controls, threaded.controls)


def test_open_loop_control_shapes(make_setup):
    setup = make_setup(n_cells=16, S=2, N=2)
    y0 = _first_mode(setup.grid)
    tgrid = TimeGrid(0.0, 0.01, 5)
    shared = simulate(y0, setup, tgrid, np.ones((5, 2)))
    per_sample = simulate(y0, setup, tgrid, np.ones((2, 5, 2)))
    np.testing.assert_allclose(shared.states, per_sample.states)
    with pytest.raises(ConfigError):
        simulate(y0, setup, tgrid, np.ones((4, 2)))
    with pytest.raises(ConfigError):
        simulate(np.ones((3, setup.grid.n_nodes)), setup, tgrid)


def test_source_term_enters_the_step(make_setup):
    setup = make_setup(n_cells=16, S=1, N=0, reaction=0.0)
    tgrid = TimeGrid(0.0, 0.01, 3)
    zero = np.zeros(setup.grid.n_nodes)
    load = setup.M @ np.ones(setup.grid.n_nodes)
    traj = simulate(zero, setup, tgrid, source=lambda t: load)
    assert traj.forcing.shape == (3, setup.grid.n_nodes)
    assert traj.E_H2[-1] > 0


def test_energy_and_observability_report(make_setup):
    setup = make_setup(n_cells=16, S=2, N=0, reaction=0.0)
    traj = simulate(_first_mode(setup.grid), setup, TimeGrid.over(0.0, 0.5, 0.01))
    report = check_energy_observability(traj, setup, "uniform")
    assert report.energy_rhs == pytest.approx(traj.E_H2[0])
    assert report.c_energy > 0
    assert report.observability_ratio > 0


# --------- Time grid and fits ---------------------------------------------------

def test_time_grid():
    tgrid = TimeGrid.over(0.5, 0.3, 0.1)
    assert tgrid.n_steps == 3
    np.testing.assert_allclose(tgrid.times, [0.5, 0.6, 0.7, 0.8])
    assert tgrid.t_end == pytest.approx(0.8)
    with pytest.raises(ConfigError):
        TimeGrid.over(0.0, 0.55, 0.1)
    with pytest.raises(ConfigError):
        TimeGrid(0.0, 0.0, 3)
    with pytest.raises(ConfigError):
        TimeGrid(0.0, 0.1, 0)


def test_fit_exponential_recovers_rate():
    t = np.linspace(0.0, 2.0, 41)
    fit = fit_exponential(t, 3.0 * np.exp(-2.0 * t))
    assert fit.rate == pytest.approx(2.0)
    assert fit.constant == pytest.approx(3.0)
    assert fit.r_squared == pytest.approx(1.0)


def test_fit_exponential_on_zero_series():
    fit = fit_exponential(np.linspace(0, 1, 5), np.zeros(5))
    assert fit.rate == 0.0
    assert math.isnan(fit.r_squared)


# --------- Embedding constant ---------------------------------------------------

def test_embedding_constant_for_constant_reaction(uniform_spec):
    grid = build_grid(1, 1.0, 64)
    ensemble = build_ensemble(uniform_spec, grid, 1, 0)
    setup = build_setup(ensemble, build_actuators(grid, 0), ReactionForm(value=-3.0))
    # |<a y, y>| / (|a| |y|_H |y|_V) peaks at the first mode, 1/pi
    assert calibrate_embedding_constant(setup, safety=1.5) == pytest.approx(1.5 / math.pi, abs=0.01)
    assert calibrate_embedding_constant(setup, safety=1.0) <= 1.0 / math.pi + 0.005


def test_embedding_constant_vanishes_without_lower_order_terms(make_setup):
    assert calibrate_embedding_constant(make_setup(N=0, reaction=0.0)) == 0.0
