"""
Receding-horizon loops over the frozen ensemble and their performance metrics.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from dynamics import EnsembleStepper, SpatialSetup, TimeGrid, Trajectory, fit_exponential, simulate
from errors import ConfigError, OcpNotConverged
from models import OcpConfig, RhcConfig
from ocp import ValueInfinitySurrogate, solve_ocp, trajectory_cost

logger = logging.getLogger(__name__)

MIN_DECAY_POINTS = 10


@dataclass(frozen=True)
class CycleRecord:
    k: int
    t_k: float
    V_T: float
    E_H2: float
    E_V2: float
    u_norm: float
    cg_iterations: int


@dataclass(frozen=True)
class DecayFit:
    zeta_hat: float
    ce_hat: float
    r_squared: float
    max_residual: float


@dataclass
class RhcResult:
    trace: Trajectory
    cycles: List[CycleRecord]
    mode: str
    V_T0: float
    J_inf_rh: float
    alpha_hat: float
    decay: Optional[DecayFit]
    tail_bound: float
    state_integral: float
    control_integral: float
    completed: bool = True
    notes: List[str] = field(default_factory=list)

    @property
    def cycle_times(self) -> np.ndarray:
        return np.array([c.t_k for c in self.cycles] + [self.trace.times[-1]])

    @property
    def cycle_energies(self) -> np.ndarray:
        return np.array([c.E_H2 for c in self.cycles] + [float(self.trace.E_H2[-1])])


def _steps_per_cycle(cfg: RhcConfig, dt: float) -> int:
    steps = cfg.delta / dt
    if abs(steps - round(steps)) > 1e-9 * max(1.0, steps) or round(steps) < 1:
        raise ConfigError(f"delta = {cfg.delta} is not a positive multiple of dt = {dt}", module="rhc")
    return int(round(steps))


def horizon_config(cfg: RhcConfig, ocp_cfg: OcpConfig) -> OcpConfig:
    if cfg.T < cfg.delta:
        raise ConfigError(f"prediction horizon T = {cfg.T} is shorter than delta = {cfg.delta}", module="rhc")
    update = {"T": cfg.T}
    if cfg.mode == "lognormal":
        update.update(control_mode="deterministic", ell="V")
    return ocp_cfg.model_copy(update=update)


def _concatenate(segments: List[Trajectory]) -> Trajectory:
    first = segments[0]
    return Trajectory(
        times=np.concatenate([first.times] + [s.times[1:] for s in segments[1:]]),
        states=np.concatenate([first.states] + [s.states[:, 1:] for s in segments[1:]], axis=1),
        controls=np.concatenate([s.controls for s in segments], axis=1),
        h2=np.concatenate([first.h2] + [s.h2[:, 1:] for s in segments[1:]], axis=1),
        v2=np.concatenate([first.v2] + [s.v2[:, 1:] for s in segments[1:]], axis=1),
    )


def _segment(traj: Trajectory, steps: int) -> Trajectory:
    return Trajectory(
        times=traj.times[: steps + 1],
        states=traj.states[:, : steps + 1],
        controls=np.array(traj.controls[:, :steps]),
        h2=traj.h2[:, : steps + 1],
        v2=traj.v2[:, : steps + 1],
    )


def _run(
    y0: np.ndarray,
    setup: SpatialSetup,
    cfg: RhcConfig,
    ocp_cfg: OcpConfig,
    stepper: EnsembleStepper,
    workers: Optional[int],
) -> RhcResult:
    dt = stepper.dt
    steps = _steps_per_cycle(cfg, dt)
    horizon = horizon_config(cfg, ocp_cfg)
    state = np.atleast_2d(np.asarray(y0, dtype=float))
    if state.shape[0] == 1:
        state = np.repeat(state, setup.n_samples, axis=0)

    segments: List[Trajectory] = []
    cycles: List[CycleRecord] = []
    V_T0 = 0.0
    notes: List[str] = []
    for k in range(cfg.n_cycles):
        t_k = k * cfg.delta
        if cfg.mode == "lognormal":
            # pointwise root mean square over samples; sign information is dropped
            initial = np.sqrt(np.sum(state ** 2, axis=0) / setup.n_samples)
        else:
            initial = state
        try:
            solution = solve_ocp(t_k, initial, horizon, setup, stepper, workers=workers)
        except OcpNotConverged as exc:
            partial = _assemble(segments, cycles, cfg, horizon, V_T0, notes, completed=False) if segments else None
            raise OcpNotConverged(f"cycle {k} at t={t_k:.4g}: {exc}", module="rhc", partial=partial) from exc
        if k == 0:
            V_T0 = solution.V_T
            if cfg.mode == "lognormal" and not np.allclose(state, initial[np.newaxis]):
                planned = V_T0
                V_T0 = solve_ocp(0.0, state, horizon, setup, stepper, workers=workers).V_T
                notes.append(
                    f"V_T0 = {V_T0:.6g} is the deterministic-control value from the ensemble y0; "
                    f"the root-mean-square plan gave {planned:.6g}"
                )
        if cfg.mode == "lognormal":
            controls = solution.u_star.head(steps).values
            segment = simulate(state, setup, TimeGrid(t_k, dt, steps), controls, stepper, workers=workers)
        else:
            segment = _segment(solution.y_star, steps)
        cycles.append(CycleRecord(
            k=k,
            t_k=t_k,
            V_T=solution.V_T,
            E_H2=float(segment.E_H2[0]),
            E_V2=float(segment.E_V2[0]),
            u_norm=float(np.sqrt(np.mean(segment.E_U2))) if segment.controls.size else 0.0,
            cg_iterations=solution.iterations,
        ))
        logger.debug("cycle %d (t=%.3g): V_T=%.5g, E|y|_H^2=%.5g", k, t_k, solution.V_T, cycles[-1].E_H2)
        segments.append(segment)
        state = segment.states[:, -1]

    result = _assemble(segments, cycles, cfg, horizon, V_T0, notes, completed=True)
    logger.info(
        "rhc (%s): %d cycles, V_T0=%.6g, J_inf_rh=%.6g, alpha_hat=%.4g",
        cfg.mode, cfg.n_cycles, result.V_T0, result.J_inf_rh, result.alpha_hat,
    )
    return result


def _assemble(segments, cycles, cfg: RhcConfig, horizon: OcpConfig, V_T0: float, notes: List[str],
              completed: bool) -> RhcResult:
    trace = _concatenate(segments)
    controls_mode = "deterministic" if cfg.mode == "lognormal" else "stochastic"
    J_inf_rh = trajectory_cost(trace, horizon, controls_mode)
    dt = float(trace.times[1] - trace.times[0])
    state_integral = dt * float(np.sum(trace.E_H2[1:]))
    control_integral = dt * float(np.sum(trace.E_U2)) if trace.controls.size else 0.0
    alpha_hat = V_T0 / J_inf_rh if J_inf_rh > 0 else float("nan")

    times = np.array([c.t_k for c in cycles] + [float(trace.times[-1])])
    energies = np.array([c.E_H2 for c in cycles] + [float(trace.E_H2[-1])])
    decay = decay_fit(times, energies) if len(times) >= MIN_DECAY_POINTS else None

    running = trace.E_H2 if horizon.ell == "H" else trace.E_V2
    tail_fit = fit_exponential(trace.times, running)
    if tail_fit.rate > 0:
        tail = 0.5 * tail_fit.constant * math.exp(-tail_fit.rate * trace.times[-1]) / tail_fit.rate
    else:
        tail = 0.0 if not np.any(running) else float("inf")
    return RhcResult(
        trace=trace,
        cycles=cycles,
        mode=cfg.mode,
        V_T0=V_T0,
        J_inf_rh=J_inf_rh,
        alpha_hat=alpha_hat,
        decay=decay,
        tail_bound=tail,
        state_integral=state_integral,
        control_integral=control_integral,
        completed=completed,
        notes=list(notes),
    )


def run_rhc_stochastic(
    y0: np.ndarray,
    setup: SpatialSetup,
    cfg: RhcConfig,
    ocp_cfg: OcpConfig,
    stepper: Optional[EnsembleStepper] = None,
    dt: Optional[float] = None,
    workers: Optional[int] = None,
) -> RhcResult:
    """Receding horizon with per-sample controls on the uniformly bounded families."""
    if cfg.mode != "stochastic":
        raise ConfigError(f"run_rhc_stochastic needs mode 'stochastic', got {cfg.mode!r}", module="rhc")
    if setup.ensemble.spec.family == "lognormal":
        raise ConfigError("the stochastic loop needs a uniformly bounded diffusion family", module="rhc")
    if ocp_cfg.control_mode != "stochastic":
        ocp_cfg = ocp_cfg.model_copy(update={"control_mode": "stochastic"})
    return _run(y0, setup, cfg, ocp_cfg, stepper or EnsembleStepper(setup, dt), workers)


def run_rhc_lognormal(
    y0: np.ndarray,
    setup: SpatialSetup,
    cfg: RhcConfig,
    ocp_cfg: OcpConfig,
    stepper: Optional[EnsembleStepper] = None,
    dt: Optional[float] = None,
    workers: Optional[int] = None,
) -> RhcResult:
    """Receding horizon with one deterministic control, re-planned from the root-mean-square state."""
    if cfg.mode != "lognormal":
        raise ConfigError(f"run_rhc_lognormal needs mode 'lognormal', got {cfg.mode!r}", module="rhc")
    if not setup.convection.is_zero:
        raise ConfigError("the log-normal loop requires b = 0", module="rhc")
    return _run(y0, setup, cfg, ocp_cfg, stepper or EnsembleStepper(setup, dt), workers)


def decay_fit(times: np.ndarray, energies: np.ndarray, tail_fraction: float = 0.5) -> DecayFit:
    """(zeta_hat, ce_hat) with E|y(t)|_H^2 ~ ce_hat exp(-zeta_hat t) on the latter part of the trace."""
    times = np.asarray(times, dtype=float)
    energies = np.asarray(energies, dtype=float)
    if len(times) < MIN_DECAY_POINTS:
        raise ConfigError(f"decay fit needs at least {MIN_DECAY_POINTS} instants, got {len(times)}", module="rhc")
    fit = fit_exponential(times, energies, tail_fraction)
    start = len(times) - fit.n_points
    if fit.rate == 0.0 and np.isnan(fit.r_squared):
        return DecayFit(zeta_hat=0.0, ce_hat=fit.constant, r_squared=fit.r_squared, max_residual=float("nan"))
    model = fit.constant * np.exp(-fit.rate * times[start:])
    residual = np.abs(energies[start:] - model) / np.maximum(np.abs(model), np.finfo(float).tiny)
    return DecayFit(zeta_hat=fit.rate, ce_hat=fit.constant, r_squared=fit.r_squared, max_residual=float(residual.max()))


@dataclass(frozen=True)
class SuboptimalityReport:
    alpha_hat: float
    V_T0: float
    J_inf_rh: float
    tail_bound: float
    V_inf_lower: float
    V_inf_upper: Optional[float]
    value_below_surrogate: bool
    cost_above_surrogate: bool
    state_cost_bound: Optional[float] = None
    control_cost_bound: Optional[float] = None
    cost_bounds_hold: Optional[bool] = None


def suboptimality_report(
    result: RhcResult,
    v_inf: ValueInfinitySurrogate,
    tol: float = 0.02,
    gamma2_hat: Optional[float] = None,
    y0_norm_sq: Optional[float] = None,
    beta_penalty: Optional[float] = None,
) -> SuboptimalityReport:
    """The computable parts of alpha V_inf <= alpha J_inf(u_rh) <= V_T <= V_inf.

    Both sides are checked against V_{T_big}; the feedback cost ``v_inf.upper`` is
    only reported.
    """
    value_ok = result.V_T0 <= v_inf.lower * (1.0 + tol) + 1e-14
    cost_ok = result.J_inf_rh + result.tail_bound >= v_inf.lower * (1.0 - tol) - 1e-14
    state_bound = control_bound = bounds_ok = None
    if gamma2_hat is not None and y0_norm_sq is not None and result.alpha_hat > 0:
        state_bound = 2.0 * gamma2_hat / result.alpha_hat * y0_norm_sq
        bounds_ok = result.state_integral <= state_bound * (1.0 + tol)
        if beta_penalty:
            control_bound = state_bound / beta_penalty
            bounds_ok = bounds_ok and result.control_integral <= control_bound * (1.0 + tol)
    if not (value_ok and cost_ok):
        logger.warning(
            "suboptimality sandwich violated: V_T0=%.6g, J_inf_rh=%.6g (+%.3g), V_inf in [%.6g, %s]",
            result.V_T0, result.J_inf_rh, result.tail_bound, v_inf.lower, v_inf.upper,
        )
    return SuboptimalityReport(
        alpha_hat=result.alpha_hat,
        V_T0=result.V_T0,
        J_inf_rh=result.J_inf_rh,
        tail_bound=result.tail_bound,
        V_inf_lower=v_inf.lower,
        V_inf_upper=v_inf.upper,
        value_below_surrogate=bool(value_ok),
        cost_above_surrogate=bool(cost_ok),
        state_cost_bound=state_bound,
        control_cost_bound=control_bound,
        cost_bounds_hold=bounds_ok,
    )


@dataclass(frozen=True)
class HorizonPoint:
    T: float
    V_T0: float
    J_inf_rh: float
    alpha_hat: float


@dataclass(frozen=True)
class HorizonSweep:
    points: List[HorizonPoint]
    smallest_positive_T: Optional[float]
    nondecreasing: bool


def horizon_sweep(
    y0: np.ndarray,
    setup: SpatialSetup,
    cfg: RhcConfig,
    ocp_cfg: OcpConfig,
    horizons: Sequence[float],
    stepper: EnsembleStepper,
    workers: Optional[int] = None,
    tol: float = 0.02,
) -> HorizonSweep:
    """alpha_hat(T) at fixed delta; flags the smallest T with alpha_hat > 0."""
    runner = run_rhc_lognormal if cfg.mode == "lognormal" else run_rhc_stochastic
    points = []
    for T in sorted(horizons):
        result = runner(y0, setup, cfg.model_copy(update={"T": T}), ocp_cfg, stepper, workers=workers)
        points.append(HorizonPoint(T=T, V_T0=result.V_T0, J_inf_rh=result.J_inf_rh, alpha_hat=result.alpha_hat))
    alphas = [p.alpha_hat for p in points]
    positive = [p.T for p in points if p.alpha_hat > 0]
    nondecreasing = all(b >= a - tol * abs(a) for a, b in zip(alphas, alphas[1:]))
    logger.info("horizon sweep: alpha_hat %s", ", ".join(f"T={p.T:g}: {p.alpha_hat:.4g}" for p in points))
    return HorizonSweep(points=points, smallest_positive_T=positive[0] if positive else None,
                        nondecreasing=nondecreasing)
