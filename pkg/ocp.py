"""
Finite-horizon open-loop problem over the frozen ensemble.

Controls are piecewise constant on the integrator grid. The cost is the
discrete quadratic

    J(u) = 1/2 sum_{k=1..K} dt E[l(y^k)] + beta/2 sum_{k=0..K-1} dt |u^k|_U^2

and gradients come from the adjoint of the discrete stepper, so they are the
exact derivatives of the computed cost.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import scipy.linalg

from dynamics import (
    EnsembleStepper,
    FeedbackGain,
    SpatialSetup,
    TimeGrid,
    Trajectory,
    map_samples,
    simulate,
    solve_closed_loop,
)
from errors import ConfigError, OcpNotConverged
from models import OcpConfig
from random_fields import InitialStateSpec, initial_state, sample_seed

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ControlSignal:
    """(K, N_sigma) for deterministic controls, (S, K, N_sigma) for stochastic ones."""

    values: np.ndarray
    mode: str
    dt: float

    @property
    def n_steps(self) -> int:
        return self.values.shape[-2]

    def per_sample(self, S: int) -> np.ndarray:
        if self.mode == "deterministic":
            return np.broadcast_to(self.values, (S,) + self.values.shape)
        return self.values

    def head(self, steps: int) -> "ControlSignal":
        return ControlSignal(self.values[..., :steps, :].copy(), self.mode, self.dt)

    def squared_norms(self) -> np.ndarray:
        """|u^k|_U^2 per step."""
        sq = np.sum(self.values ** 2, axis=-1)
        if self.mode == "stochastic":
            return np.sum(sq, axis=0) / sq.shape[0]
        return sq


@dataclass
class OcpSolution:
    u_star: ControlSignal
    y_star: Trajectory
    J_value: float
    grad_norm: float
    initial_grad_norm: float
    J_zero: float
    iterations: int
    converged: bool
    history: List[float] = field(default_factory=list)

    @property
    def V_T(self) -> float:
        return self.J_value


def state_weight(setup: SpatialSetup, ell: str):
    return setup.M if ell == "H" else setup.A_0


def trajectory_cost(traj: Trajectory, cfg: OcpConfig, controls_mode: str = "stochastic") -> float:
    """Running cost of a simulated trajectory with the quadrature used by OcpProblem.cost."""
    dt = float(traj.times[1] - traj.times[0])
    values = traj.h2 if cfg.ell == "H" else traj.v2
    state = 0.5 * dt * float(np.sum(np.sum(values[:, 1:], axis=0) / traj.n_samples))
    if traj.controls.size == 0:
        return state
    if controls_mode == "deterministic":
        control_sq = np.sum(traj.controls[0] ** 2, axis=-1)
    else:
        control_sq = traj.E_U2
    return state + 0.5 * cfg.beta_penalty * dt * float(np.sum(control_sq))


class OcpProblem:
    """The reduced quadratic u -> J(u) for one (t0, y0) pair."""

    def __init__(
        self,
        t0: float,
        y0: np.ndarray,
        cfg: OcpConfig,
        setup: SpatialSetup,
        stepper: Optional[EnsembleStepper] = None,
        dt: Optional[float] = None,
        workers: Optional[int] = None,
    ):
        if stepper is None and dt is None:
            raise ConfigError("OcpProblem needs a stepper or a time step", module="ocp")
        self.cfg = cfg
        self.setup = setup
        self.stepper = stepper or EnsembleStepper(setup, dt)
        self.tgrid = TimeGrid.over(t0, cfg.T, self.stepper.dt)
        self.y0 = np.atleast_2d(np.asarray(y0, dtype=float))
        if self.y0.shape[0] == 1 and setup.n_samples > 1:
            self.y0 = np.repeat(self.y0, setup.n_samples, axis=0)
        self.workers = workers
        self.Q = state_weight(setup, cfg.ell)

    @property
    def S(self) -> int:
        return self.setup.n_samples

    @property
    def control_shape(self) -> tuple:
        K, k = self.tgrid.n_steps, self.setup.actuators.N_sigma
        return (K, k) if self.cfg.control_mode == "deterministic" else (self.S, K, k)

    def signal(self, values: np.ndarray) -> ControlSignal:
        return ControlSignal(np.asarray(values, dtype=float).reshape(self.control_shape),
                             self.cfg.control_mode, self.tgrid.dt)

    def zeros(self) -> ControlSignal:
        return self.signal(np.zeros(self.control_shape))

    def forward(self, u: ControlSignal, y0: Optional[np.ndarray] = None) -> Trajectory:
        y0 = self.y0 if y0 is None else y0
        return simulate(y0, self.setup, self.tgrid, u.per_sample(self.S), self.stepper, workers=self.workers)

    def cost(self, u: ControlSignal, y0: Optional[np.ndarray] = None) -> float:
        traj = self.forward(u, y0)
        dt = self.tgrid.dt
        values = traj.h2 if self.cfg.ell == "H" else traj.v2
        state = 0.5 * dt * float(np.sum(np.sum(values[:, 1:], axis=0) / self.S))
        control = 0.5 * self.cfg.beta_penalty * dt * float(np.sum(u.squared_norms()))
        return state + control

    def gradient(self, u: ControlSignal, y0: Optional[np.ndarray] = None) -> ControlSignal:
        traj = self.forward(u, y0)
        dt = self.tgrid.dt
        w = 1.0 / self.S
        times = self.tgrid.times
        K = self.tgrid.n_steps
        MX = self.setup.MX

        def backward(s: int) -> np.ndarray:
            grads = np.empty((K, MX.shape[1]))
            states = traj.states[s]
            lam = dt * w * (self.Q @ states[K])
            for k in range(K - 1, -1, -1):
                q = self.stepper.solve_transpose(s, lam, times[k + 1])
                grads[k] = dt * (MX.T @ q)
                if k:
                    lam = dt * w * (self.Q @ states[k]) + self.stepper.explicit_part_transpose(s, q, times[k])
            return grads

        per_sample = np.stack(map_samples(backward, self.S, self.workers))
        beta = self.cfg.beta_penalty
        if self.cfg.control_mode == "deterministic":
            grad = np.sum(per_sample, axis=0) + beta * dt * u.values
        else:
            grad = per_sample + beta * dt * w * u.values
        return self.signal(grad)

    def hessian_apply(self, v: ControlSignal) -> ControlSignal:
        """H v: the gradient of the quadratic part, i.e. the gradient from zero initial data."""
        return self.gradient(v, np.zeros_like(self.y0))


def cost(u: ControlSignal, t0: float, y0: np.ndarray, cfg: OcpConfig, setup: SpatialSetup,
         stepper: Optional[EnsembleStepper] = None, dt: Optional[float] = None) -> float:
    return OcpProblem(t0, y0, cfg, setup, stepper, dt).cost(u)


def gradient(u: ControlSignal, t0: float, y0: np.ndarray, cfg: OcpConfig, setup: SpatialSetup,
             stepper: Optional[EnsembleStepper] = None, dt: Optional[float] = None) -> ControlSignal:
    return OcpProblem(t0, y0, cfg, setup, stepper, dt).gradient(u)


def solve_ocp(
    t0: float,
    y0: np.ndarray,
    cfg: OcpConfig,
    setup: SpatialSetup,
    stepper: Optional[EnsembleStepper] = None,
    dt: Optional[float] = None,
    workers: Optional[int] = None,
    raise_on_failure: bool = True,
) -> OcpSolution:
    """Conjugate gradients on H u = -grad J(0)."""
    problem = OcpProblem(t0, y0, cfg, setup, stepper, dt, workers)
    if cfg.beta_penalty <= 0 and setup.actuators.N_sigma:
        raise ConfigError("beta_penalty must be positive for a strictly convex problem", module="ocp")

    u = problem.zeros()
    J_zero = problem.cost(u)
    b = -problem.gradient(u).values.ravel()
    b_norm = float(np.linalg.norm(b))
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = float(r @ r)
    history = [math.sqrt(rr)]
    iterations = 0
    converged = b_norm == 0.0
    while not converged and iterations < cfg.cg_max_iter:
        Hp = problem.hessian_apply(problem.signal(p)).values.ravel()
        curvature = float(p @ Hp)
        if curvature <= 0:
            logger.warning("CG met nonpositive curvature %.3e at iteration %d", curvature, iterations)
            break
        step = rr / curvature
        x += step * p
        r -= step * Hp
        rr_next = float(r @ r)
        iterations += 1
        history.append(math.sqrt(rr_next))
        if math.sqrt(rr_next) <= cfg.cg_tol * b_norm:
            converged = True
            break
        p = r + (rr_next / rr) * p
        rr = rr_next

    u_star = problem.signal(x)
    traj = problem.forward(u_star)
    solution = OcpSolution(
        u_star=u_star,
        y_star=traj,
        J_value=problem.cost(u_star),
        grad_norm=history[-1],
        initial_grad_norm=b_norm,
        J_zero=J_zero,
        iterations=iterations,
        converged=converged,
        history=history,
    )
    logger.debug("OCP at t0=%.4g: %d CG iterations, V_T=%.6g, |grad| %.2e -> %.2e",
                 t0, iterations, solution.J_value, b_norm, solution.grad_norm)
    if not converged:
        message = f"CG stopped after {iterations} iterations with residual {solution.grad_norm:.3e}"
        if raise_on_failure:
            raise OcpNotConverged(message, module="ocp", partial=solution)
        logger.warning(message)
    return solution


# --------- Dense oracles (small instances) --------------------------------------

def reduced_hessian(problem: OcpProblem) -> np.ndarray:
    size = int(np.prod(problem.control_shape))
    H = np.empty((size, size))
    for j in range(size):
        e = np.zeros(size)
        e[j] = 1.0
        H[:, j] = problem.hessian_apply(problem.signal(e)).values.ravel()
    return 0.5 * (H + H.T)


def solve_dense_kkt(problem: OcpProblem) -> ControlSignal:
    H = reduced_hessian(problem)
    b = -problem.gradient(problem.zeros()).values.ravel()
    return problem.signal(scipy.linalg.solve(H, b, assume_a="pos"))


# --------- Value-function diagnostics -------------------------------------------

@dataclass(frozen=True)
class ValueRatios:
    gamma1_hat: float
    gamma2_hat: float
    ratios: np.ndarray
    homogeneity_error: float


def value_ratio_sweep(
    setup: SpatialSetup,
    cfg: OcpConfig,
    stepper: EnsembleStepper,
    n_random: int = 20,
    scales: Sequence[float] = (0.1, 1.0, 10.0),
    seed: int = 0,
    t0: float = 0.0,
) -> ValueRatios:
    """V_T(t0, y0) / |y0|^2_{H_P} over random initial ensembles and a range of scalings.

    homogeneity_error compares V_T(c y0) with c^2 V_T(y0) across the scales
    of the first ensemble.
    """
    spec = InitialStateSpec(profile=0.0, noise=1.0, n_modes=6, decay=1.0)
    ratios = []
    homogeneity = 0.0
    for i in range(n_random):
        y0 = np.stack([
            initial_state(setup.grid, spec, sample_seed(seed, i * setup.n_samples + s, 2))
            for s in range(setup.n_samples)
        ])
        norm_sq = float(np.sum(np.einsum("sn,sn->s", y0, (setup.M @ y0.T).T)) / setup.n_samples)
        values = [solve_ocp(t0, c * y0, cfg, setup, stepper).V_T for c in scales]
        normalized = [v / (c * c * norm_sq) for v, c in zip(values, scales)]
        ratios.extend(normalized)
        if i == 0:
            homogeneity = (max(normalized) - min(normalized)) / max(abs(normalized[0]), np.finfo(float).tiny)
    ratios = np.array(ratios)
    logger.info("value ratios: gamma1 %.4g, gamma2 %.4g", ratios.min(), ratios.max())
    return ValueRatios(float(ratios.min()), float(ratios.max()), ratios, float(homogeneity))


@dataclass(frozen=True)
class ValueInfinitySurrogate:
    T_big: float
    lower: float  # V_{T_big}
    upper: Optional[float]  # closed-loop feedback cost over the same window; context only

    @property
    def value(self) -> float:
        return self.lower


def value_infinity_surrogate(
    y0: np.ndarray,
    setup: SpatialSetup,
    cfg: OcpConfig,
    stepper: EnsembleStepper,
    T_max: float,
    factor: float = 4.0,
    gain: Optional[FeedbackGain] = None,
) -> ValueInfinitySurrogate:
    T_big = factor * T_max
    long_cfg = cfg.model_copy(update={"T": T_big})
    lower = solve_ocp(0.0, y0, long_cfg, setup, stepper).V_T
    upper = None
    if gain is not None and cfg.control_mode == "stochastic":
        tgrid = TimeGrid.over(0.0, T_big, stepper.dt)
        traj = solve_closed_loop(y0, setup, gain, tgrid)
        upper = trajectory_cost(traj, cfg)
    logger.info("V_inf surrogate over T=%.4g: V_T=%.6g, feedback cost=%s", T_big, lower, upper)
    return ValueInfinitySurrogate(T_big=T_big, lower=lower, upper=upper)
