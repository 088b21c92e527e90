"""
Time integration of the random state equation over a frozen ensemble.

Every sample s has its own diffusion stiffness A_nu(s); reaction and
convection are shared across samples and may depend on time. A step of the
theta-scheme from t to t + dt solves

    (M + theta dt K_s(t+dt)) y+ = (M - (1 - theta) dt K_s(t)) y + dt M X u + dt f

with K_s = A_nu(s) + R + B and X the actuator indicators. The stabilizing
feedback u = F y is either folded into the step matrix (Woodbury update,
default) or evaluated at the previous time level.
"""
from __future__ import annotations

import logging
import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from dotenv import load_dotenv
from scipy.integrate import trapezoid
from scipy.stats import linregress

from errors import ConfigError, InsufficientActuatorsError, LinearSolveError
from mesh_fem import (
    ConvectionForm,
    DiscreteOperators,
    ReactionForm,
    convection_matrix,
    first_eigenvalue,
    load_dual_norm,
    mass_matrix,
    nab_norm,
    reaction_matrix,
    stiffness_matrix,
    unit_stiffness,
)
from projections import ObliqueProjector, feedback_projectors
from random_fields import Ensemble
from spectral_actuators import ActuatorSet, EigenBasis, SpectralGap, build_eigenbasis

logger = logging.getLogger(__name__)

load_dotenv()

# 0 means one worker per CPU
RHC_WORKERS = int(os.environ.get("RHC_WORKERS", "1"))

SCHEMES = {"implicit_euler": 1.0, "crank_nicolson": 0.5}
GainVariant = Literal["general", "bounded_reaction"]
Coupling = Literal["implicit", "explicit"]


def resolve_workers(workers: Optional[int] = None) -> int:
    workers = RHC_WORKERS if workers is None else int(workers)
    if workers <= 0:
        workers = os.cpu_count() or 1
    return workers


def map_samples(fn: Callable[[int], object], count: int, workers: Optional[int] = None) -> List[object]:
    """fn(0..count-1) in sample order; threads when workers > 1."""
    workers = min(resolve_workers(workers), max(count, 1))
    if workers == 1:
        return [fn(s) for s in range(count)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(count)))


# --------- Types ----------------------------------------------------------------

@dataclass(frozen=True)
class TimeGrid:
    t0: float
    dt: float
    n_steps: int

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError(f"time step must be positive, got {self.dt}", module="dynamics")
        if self.n_steps < 1:
            raise ConfigError(f"need at least one time step, got {self.n_steps}", module="dynamics")

    @classmethod
    def over(cls, t0: float, length: float, dt: float) -> "TimeGrid":
        steps = length / dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ConfigError(f"window {length} is not a multiple of dt = {dt}", module="dynamics")
        return cls(t0=t0, dt=dt, n_steps=int(round(steps)))

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    @property
    def t_end(self) -> float:
        return self.t0 + self.dt * self.n_steps


@dataclass(frozen=True)
class FeedbackGain:
    lam: float
    mu: float
    N_star: int
    lambda_star: float
    variant: str = "general"
    beta_N: float = float("nan")
    beta_threshold: float = float("nan")
    alpha1: float = float("nan")
    theta_theta: float = float("nan")
    theta_phi: float = float("nan")

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"feedback gain must be >= 0, got {self.lam}", module="dynamics")


@dataclass(frozen=True)
class ExponentialFit:
    rate: float
    constant: float
    r_squared: float
    n_points: int


@dataclass(eq=False)
class Trajectory:
    times: np.ndarray  # (K+1,)
    states: np.ndarray  # (S, K+1, n)
    controls: np.ndarray  # (S, K, N_sigma), control applied on step k
    h2: np.ndarray  # (S, K+1)
    v2: np.ndarray  # (S, K+1)
    forcing: Optional[np.ndarray] = None  # (K, n) load vectors
    energy_violations: int = 0

    @property
    def n_samples(self) -> int:
        return self.states.shape[0]

    @property
    def E_H2(self) -> np.ndarray:
        return np.sum(self.h2, axis=0) / self.n_samples

    @property
    def E_V2(self) -> np.ndarray:
        return np.sum(self.v2, axis=0) / self.n_samples

    @property
    def E_U2(self) -> np.ndarray:
        """avg_s |u_k(s)|^2 per step."""
        return np.sum(np.sum(self.controls ** 2, axis=2), axis=0) / self.n_samples

    def h2_quantiles(self, qs: Sequence[float] = (0.05, 0.5, 0.95)) -> np.ndarray:
        return np.quantile(self.h2, qs, axis=0)

    def decay(self, tail_fraction: float = 0.5) -> ExponentialFit:
        return fit_exponential(self.times, self.E_H2, tail_fraction)


# --------- Spatial setup --------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SpatialSetup:
    """Everything the integrators need that does not depend on the time grid."""

    ensemble: Ensemble
    actuators: ActuatorSet
    reaction: ReactionForm
    convection: ConvectionForm
    eigenbasis: Optional[EigenBasis]
    P_E: Optional[ObliqueProjector]
    P_O: Optional[ObliqueProjector]
    theta: float = 1.0
    coupling: str = "explicit"

    @property
    def grid(self):
        return self.ensemble.grid

    @property
    def n_samples(self) -> int:
        return self.ensemble.size

    @property
    def autonomous(self) -> bool:
        return self.reaction.autonomous and self.convection.autonomous

    @cached_property
    def M(self) -> sp.csr_matrix:
        return mass_matrix(self.grid)

    @cached_property
    def A_0(self) -> sp.csr_matrix:
        return unit_stiffness(self.grid)

    @cached_property
    def X(self) -> np.ndarray:
        return self.actuators.indicators

    @cached_property
    def MX(self) -> np.ndarray:
        return np.asarray(self.M @ self.X)

    @cached_property
    def diffusion(self) -> Tuple[sp.csr_matrix, ...]:
        return tuple(stiffness_matrix(self.grid, r.nu_cells) for r in self.ensemble.realizations)

    @cached_property
    def alpha1(self) -> float:
        return first_eigenvalue(self.grid)

    def lower_order(self, t: float) -> sp.csr_matrix:
        return (reaction_matrix(self.grid, self.reaction, t) + convection_matrix(self.grid, self.convection, t)).tocsr()

    def operators(self, s: int, t: float) -> DiscreteOperators:
        return DiscreteOperators(
            M=self.M,
            A_nu=self.diffusion[s],
            A_0=self.A_0,
            R=reaction_matrix(self.grid, self.reaction, t),
            B=convection_matrix(self.grid, self.convection, t),
        )


def build_setup(
    ensemble: Ensemble,
    actuators: ActuatorSet,
    reaction: Optional[ReactionForm] = None,
    convection: Optional[ConvectionForm] = None,
    scheme: str = "implicit_euler",
    coupling: Coupling = "explicit",
) -> SpatialSetup:
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown time scheme {scheme!r}; choose from {sorted(SCHEMES)}", module="dynamics")
    if coupling not in ("implicit", "explicit"):
        raise ConfigError(f"unknown feedback coupling {coupling!r}", module="dynamics")
    basis = P_E = P_O = None
    if actuators.N >= 1:
        basis = build_eigenbasis(ensemble.grid, actuators.N)
        P_E, P_O = feedback_projectors(basis.functions, actuators.indicators, mass_matrix(ensemble.grid))
    return SpatialSetup(
        ensemble=ensemble,
        actuators=actuators,
        reaction=reaction or ReactionForm(),
        convection=convection or ConvectionForm(),
        eigenbasis=basis,
        P_E=P_E,
        P_O=P_O,
        theta=SCHEMES[scheme],
        coupling=coupling,
    )


# --------- Single steps and the feedback law ------------------------------------

def step_implicit(
    ops: DiscreteOperators,
    y: np.ndarray,
    u: Optional[np.ndarray],
    act: ActuatorSet,
    dt: float,
    source: Optional[np.ndarray] = None,
) -> np.ndarray:
    """One implicit Euler step with operators assembled at the target time level."""
    rhs = ops.M @ y
    if u is not None and act.N_sigma:
        rhs = rhs + dt * (ops.M @ (act.indicators @ u))
    if source is not None:
        rhs = rhs + dt * source
    system = (ops.M + dt * ops.K).tocsc()
    try:
        y_next = spla.splu(system).solve(rhs)
    except RuntimeError as exc:
        raise LinearSolveError("implicit step matrix is singular", module="dynamics") from exc
    scale = max(np.linalg.norm(rhs), np.finfo(float).tiny)
    residual = np.linalg.norm(system @ y_next - rhs) / scale
    if residual > 1e-10:
        raise LinearSolveError(f"implicit step residual {residual:.2e} above 1e-10", module="dynamics")
    return y_next


def feedback_control(
    P_E: ObliqueProjector, P_O: ObliqueProjector, ops: DiscreteOperators, gain: FeedbackGain, y: np.ndarray
) -> np.ndarray:
    """u = -lam I P_O (-Laplacian) P_E y as actuator coefficients."""
    theta = P_E.apply(y)
    return -gain.lam * P_O.solve_gram(P_O.complement_basis.T @ (ops.A_0 @ theta))


def feedback_matrix(setup: SpatialSetup, gain: FeedbackGain) -> np.ndarray:
    """Dense (N_sigma, n) matrix F with feedback_control(y) = F y."""
    if setup.P_E is None or gain.lam == 0:
        return np.zeros((setup.actuators.N_sigma, setup.grid.n_nodes))
    E = setup.P_E.range_basis
    theta_map = E @ setup.P_E.solve_gram(setup.MX.T)
    return -gain.lam * setup.P_O.solve_gram(E.T @ (setup.A_0 @ theta_map))


def select_gain(
    nu_lower: float,
    nu_upper: float,
    Nab: float,
    mu: float,
    c_emb: float,
    alpha1: float,
    beta_table: Sequence[SpectralGap],
    variant: GainVariant = "general",
    lam: Optional[float] = None,
) -> FeedbackGain:
    """Smallest tabulated N whose beta_N clears the threshold, and the matching lambda*.

    ``general`` uses N(a, b) with the embedding constant; ``bounded_reaction``
    assumes b = 0 and takes ``Nab`` as ||a||_inf.
    """
    if nu_lower <= 0 or alpha1 <= 0 or mu < 0:
        raise ConfigError("gain selection needs nu_lower > 0, alpha1 > 0 and mu >= 0", module="dynamics")
    if variant == "general":
        coupling_term = 3.0 * (c_emb * Nab) ** 2
        threshold = (2.0 / nu_lower) * (4.0 * mu + coupling_term / (2.0 * nu_lower))
        lambda_star = (4.0 * mu + coupling_term / nu_lower) / (2.0 * alpha1) + nu_upper / 2.0
    elif variant == "bounded_reaction":
        threshold = (4.0 * mu + 3.0 * Nab) / nu_lower
        lambda_star = (2.0 * mu + 3.0 * Nab) / alpha1 + nu_upper
    else:
        raise ConfigError(f"unknown gain variant {variant!r}", module="dynamics")

    admissible = sorted((g for g in beta_table if g.N >= 1 and g.beta_N >= threshold), key=lambda g: g.N)
    if not admissible:
        largest = max((g.N for g in beta_table), default=0)
        raise InsufficientActuatorsError(
            f"no N <= {largest} reaches beta_N >= {threshold:.4g}; extend the beta table", module="dynamics"
        )
    chosen = admissible[0]
    if lam is None:
        lam = lambda_star
    elif lam < lambda_star:
        logger.warning("requested gain %.4g is below lambda* = %.4g", lam, lambda_star)

    if variant == "general":
        theta_theta = (2.0 * lam - nu_upper) * alpha1 - coupling_term / nu_lower
        theta_phi = 0.5 * nu_lower * chosen.beta_N - coupling_term / (2.0 * nu_lower)
    else:
        theta_theta = 2.0 * (lam - nu_upper) * alpha1 - 6.0 * Nab
        theta_phi = nu_lower * chosen.beta_N - 3.0 * Nab
    gain = FeedbackGain(
        lam=float(lam),
        mu=float(mu),
        N_star=chosen.N,
        lambda_star=float(lambda_star),
        variant=variant,
        beta_N=chosen.beta_N,
        beta_threshold=float(threshold),
        alpha1=float(alpha1),
        theta_theta=float(theta_theta),
        theta_phi=float(theta_phi),
    )
    logger.info(
        "gain (%s): N*=%d (beta %.4g >= %.4g), lambda*=%.4g, lambda=%.4g, Theta=(%.4g, %.4g)",
        variant, gain.N_star, gain.beta_N, threshold, lambda_star, gain.lam, theta_theta, theta_phi,
    )
    return gain


# --------- Ensemble stepper -----------------------------------------------------

class EnsembleStepper:
    """Factorizations cached per (sample, time level); shared by every solver of a run."""

    def __init__(self, setup: SpatialSetup, dt: float, feedback: Optional[np.ndarray] = None):
        if not dt > 0:
            raise ConfigError(f"time step must be positive, got {dt}", module="dynamics")
        self.setup = setup
        self.dt = float(dt)
        self.feedback = feedback
        self._lock = threading.Lock()
        self._lower: Dict[int, sp.csr_matrix] = {}
        self._factors: Dict[Tuple[int, int], object] = {}
        self._woodbury: Dict[Tuple[int, int], Tuple[np.ndarray, tuple]] = {}

    def level(self, t: float) -> int:
        return 0 if self.setup.autonomous else int(round(t / self.dt))

    def _lower_order(self, level: int) -> sp.csr_matrix:
        matrix = self._lower.get(level)
        if matrix is None:
            matrix = self.setup.lower_order(level * self.dt)
            with self._lock:
                self._lower[level] = matrix
        return matrix

    def operator(self, s: int, t: float) -> sp.csr_matrix:
        return (self.setup.diffusion[s] + self._lower_order(self.level(t))).tocsr()

    def _factor(self, s: int, t: float):
        key = (s, self.level(t))
        lu = self._factors.get(key)
        if lu is None:
            system = (self.setup.M + self.setup.theta * self.dt * self.operator(s, t)).tocsc()
            try:
                lu = spla.splu(system)
            except RuntimeError as exc:
                raise LinearSolveError(f"step matrix of sample {s} is singular", module="dynamics") from exc
            with self._lock:
                self._factors[key] = lu
        return lu

    def explicit_part(self, s: int, y: np.ndarray, t: float) -> np.ndarray:
        out = self.setup.M @ y
        if self.setup.theta < 1.0:
            out = out - (1.0 - self.setup.theta) * self.dt * (self.operator(s, t) @ y)
        return out

    def explicit_part_transpose(self, s: int, v: np.ndarray, t: float) -> np.ndarray:
        out = self.setup.M @ v
        if self.setup.theta < 1.0:
            out = out - (1.0 - self.setup.theta) * self.dt * (self.operator(s, t).T @ v)
        return out

    def step(self, s: int, y: np.ndarray, u: Optional[np.ndarray], t: float,
             source: Optional[np.ndarray] = None) -> np.ndarray:
        """Open-loop step t -> t + dt with control u held on the step."""
        rhs = self.explicit_part(s, y, t)
        if u is not None and u.size:
            rhs = rhs + self.dt * (self.setup.MX @ u)
        if source is not None:
            rhs = rhs + self.dt * source
        return self._factor(s, t + self.dt).solve(rhs)

    def solve_transpose(self, s: int, rhs: np.ndarray, t_next: float) -> np.ndarray:
        return self._factor(s, t_next).solve(rhs, trans="T")

    def _capacitance(self, s: int, t_next: float):
        key = (s, self.level(t_next))
        cached = self._woodbury.get(key)
        if cached is None:
            lu = self._factor(s, t_next)
            Z = lu.solve(-self.setup.theta * self.dt * self.setup.MX)
            cap = scipy.linalg.lu_factor(np.eye(self.feedback.shape[0]) + self.feedback @ Z)
            cached = (Z, cap)
            with self._lock:
                self._woodbury[key] = cached
        return cached

    def closed_step(self, s: int, y: np.ndarray, t: float,
                    source: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
        """Feedback step; returns (y+, control used on the step).

        Explicit coupling holds u = F y on the step. Implicit coupling weights the
        feedback with the scheme's theta, u = theta F y+ + (1 - theta) F y, and solves
        the low-rank closed-loop system with a Woodbury update.
        """
        F = self.feedback
        if F is None or F.shape[0] == 0:
            return self.step(s, y, None, t, source), np.zeros(0 if F is None else F.shape[0])
        if self.setup.coupling == "explicit":
            u = F @ y
            return self.step(s, y, u, t, source), u
        theta = self.setup.theta
        u_old = F @ y
        rhs = self.explicit_part(s, y, t)
        if theta < 1.0:
            rhs = rhs + (1.0 - theta) * self.dt * (self.setup.MX @ u_old)
        if source is not None:
            rhs = rhs + self.dt * source
        w = self._factor(s, t + self.dt).solve(rhs)
        Z, cap = self._capacitance(s, t + self.dt)
        y_next = w - Z @ scipy.linalg.lu_solve(cap, F @ w)
        return y_next, theta * (F @ y_next) + (1.0 - theta) * u_old


# --------- Ensemble solvers -----------------------------------------------------

def _norm_series(setup: SpatialSetup, states: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    flat = states.reshape(-1, states.shape[-1]).T
    h2 = np.einsum("ij,ij->j", flat, setup.M @ flat).reshape(states.shape[:-1])
    v2 = np.einsum("ij,ij->j", flat, setup.A_0 @ flat).reshape(states.shape[:-1])
    return np.maximum(h2, 0.0), np.maximum(v2, 0.0)


def _as_sample_controls(controls: Optional[np.ndarray], S: int, K: int, k: int) -> np.ndarray:
    if controls is None:
        return np.zeros((S, K, k))
    controls = np.asarray(controls, dtype=float)
    if controls.ndim == 2:
        controls = np.broadcast_to(controls, (S,) + controls.shape)
    if controls.shape != (S, K, k):
        raise ConfigError(f"control array has shape {controls.shape}, expected {(S, K, k)}", module="dynamics")
    return controls


def _initial_states(y0: np.ndarray, setup: SpatialSetup) -> np.ndarray:
    y0 = np.atleast_2d(np.asarray(y0, dtype=float))
    if y0.shape[0] == 1 and setup.n_samples > 1:
        y0 = np.repeat(y0, setup.n_samples, axis=0)
    if y0.shape != (setup.n_samples, setup.grid.n_nodes):
        raise ConfigError(
            f"initial states have shape {y0.shape}, expected {(setup.n_samples, setup.grid.n_nodes)}",
            module="dynamics",
        )
    return y0


def _forcing(source: Optional[Callable[[float], np.ndarray]], tgrid: TimeGrid, theta: float) -> Optional[np.ndarray]:
    if source is None:
        return None
    times = tgrid.times
    return np.stack([theta * source(times[k + 1]) + (1.0 - theta) * source(times[k]) for k in range(tgrid.n_steps)])


def simulate(
    y0: np.ndarray,
    setup: SpatialSetup,
    tgrid: TimeGrid,
    controls: Optional[np.ndarray] = None,
    stepper: Optional[EnsembleStepper] = None,
    source: Optional[Callable[[float], np.ndarray]] = None,
    workers: Optional[int] = None,
) -> Trajectory:
    """Open-loop ensemble run; controls are (K, N_sigma) shared or (S, K, N_sigma) per sample."""
    y0 = _initial_states(y0, setup)
    S, K, k = setup.n_samples, tgrid.n_steps, setup.actuators.N_sigma
    controls = _as_sample_controls(controls, S, K, k)
    stepper = stepper or EnsembleStepper(setup, tgrid.dt)
    forcing = _forcing(source, tgrid, setup.theta)
    times = tgrid.times

    def run(s: int) -> np.ndarray:
        states = np.empty((K + 1, y0.shape[1]))
        states[0] = y0[s]
        for step in range(K):
            f = None if forcing is None else forcing[step]
            states[step + 1] = stepper.step(s, states[step], controls[s, step], times[step], f)
        return states

    states = np.stack(map_samples(run, S, workers))
    h2, v2 = _norm_series(setup, states)
    return Trajectory(times, states, np.array(controls), h2, v2, forcing)


def solve_closed_loop(
    y0: np.ndarray,
    setup: SpatialSetup,
    gain: FeedbackGain,
    tgrid: TimeGrid,
    stepper: Optional[EnsembleStepper] = None,
    source: Optional[Callable[[float], np.ndarray]] = None,
    workers: Optional[int] = None,
) -> Trajectory:
    y0 = _initial_states(y0, setup)
    S, K = setup.n_samples, tgrid.n_steps
    if stepper is None or stepper.feedback is None:
        stepper = EnsembleStepper(setup, tgrid.dt, feedback_matrix(setup, gain))
    forcing = _forcing(source, tgrid, setup.theta)
    times = tgrid.times
    k = setup.actuators.N_sigma

    def run(s: int) -> Tuple[np.ndarray, np.ndarray]:
        states = np.empty((K + 1, y0.shape[1]))
        controls = np.zeros((K, k))
        states[0] = y0[s]
        for step in range(K):
            f = None if forcing is None else forcing[step]
            states[step + 1], controls[step] = stepper.closed_step(s, states[step], times[step], f)
        return states, controls

    results = map_samples(run, S, workers)
    states = np.stack([r[0] for r in results])
    controls = np.stack([r[1] for r in results])
    h2, v2 = _norm_series(setup, states)
    increases = np.diff(h2[:, 1:], axis=1) > 1e-12 * np.maximum(h2[:, 1:-1], np.finfo(float).tiny)
    violations = int(np.count_nonzero(increases))
    if violations:
        logger.warning(
            "closed loop (%s coupling): %d step(s) with increasing H-energy", setup.coupling, violations
        )
    trajectory = Trajectory(times, states, controls, h2, v2, forcing, violations)
    fit = trajectory.decay()
    logger.info("closed loop: E|y|_H^2 decay rate %.4g (R^2 %.4f)", fit.rate, fit.r_squared)
    return trajectory


def fit_exponential(times: np.ndarray, values: np.ndarray, tail_fraction: float = 0.5) -> ExponentialFit:
    """Least squares of log(values) on the latter part of the series: values ~ constant * exp(-rate t)."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    start = min(int(math.floor(len(times) * (1.0 - tail_fraction))), len(times) - 2)
    window_t, window_v = times[start:], values[start:]
    if np.any(window_v <= 0) or len(window_t) < 2:
        return ExponentialFit(rate=0.0, constant=float(window_v[0]) if len(window_v) else 0.0,
                              r_squared=float("nan"), n_points=len(window_t))
    fit = linregress(window_t, np.log(window_v))
    return ExponentialFit(
        rate=float(-fit.slope),
        constant=float(math.exp(fit.intercept)),
        r_squared=float(fit.rvalue ** 2),
        n_points=len(window_t),
    )


# --------- Diagnostics ----------------------------------------------------------

def calibrate_embedding_constant(
    setup: SpatialSetup,
    n_random: int = 32,
    seed: int = 0,
    safety: float = 1.5,
    n_times: int = 4,
) -> float:
    """Empirical c with |<a y, y> + (b y, grad y)| <= c N(a,b) |y|_H |y|_V, times a safety factor."""
    Nab = nab_norm(setup.reaction, setup.convection)
    if Nab == 0:
        return 0.0
    grid = setup.grid
    rng = np.random.default_rng(seed)
    max_mode = max(2, min(grid.n_cells) // 4)
    candidates = []
    for mode in range(1, min(max_mode, 6) + 1):
        candidates.append(_mode_vector(grid, (mode,) * grid.d))
    for _ in range(n_random):
        y = np.zeros(grid.n_nodes)
        for mode in range(1, max_mode + 1):
            modes = tuple(rng.integers(1, max_mode + 1, size=grid.d)) if grid.d > 1 else (mode,)
            y += rng.standard_normal() * mode ** -1.0 * _mode_vector(grid, modes)
        candidates.append(y)
    Y = np.stack(candidates, axis=1)
    h = np.sqrt(np.einsum("ij,ij->j", Y, setup.M @ Y))
    v = np.sqrt(np.einsum("ij,ij->j", Y, setup.A_0 @ Y))
    period_times = np.linspace(0.0, 2 * np.pi / max(setup.reaction.frequency, setup.convection.frequency, 1.0), n_times)
    best = 0.0
    for t in period_times if not setup.autonomous else (0.0,):
        lower = setup.lower_order(t)
        forms = np.abs(np.einsum("ij,ij->j", Y, lower @ Y))
        best = max(best, float(np.max(forms / (Nab * h * v))))
    c = safety * best
    logger.info("embedding constant c = %.4g (raw max %.4g over %d states)", c, best, Y.shape[1])
    return c


def _mode_vector(grid, modes: Sequence[int]) -> np.ndarray:
    vec = np.ones(grid.n_nodes)
    for n, mode in enumerate(modes):
        vec *= np.sin(mode * np.pi * grid.nodes[:, n] / grid.L[n])
    return vec


def stable_regime_margin(ensemble: Ensemble, reaction: ReactionForm) -> float:
    """min over samples of nu_min + essinf a; positive means u = 0 is non-expansive."""
    return float(np.min(ensemble.nu_mins) + reaction.ess_inf())


@dataclass(frozen=True)
class EnergyObservabilityReport:
    variant: str
    energy_lhs: float
    energy_rhs: float
    c_energy: float
    observability_lhs: float
    observability_rhs: float
    observability_ratio: float


def check_energy_observability(
    traj: Trajectory,
    setup: SpatialSetup,
    variant: Literal["uniform", "lognormal"] = "uniform",
) -> EnergyObservabilityReport:
    """Empirical constants of the energy estimate and the observability inequality.

    The uniform variant measures the forcing in V' and weights the
    observability term by (1 + 1/T + N(a,b)); the log-normal variant measures
    the forcing in H and uses no weight.
    """
    times = traj.times
    window = times[-1] - times[0]
    dt = np.diff(times)
    E_V2 = traj.E_V2
    state_v = float(trapezoid(E_V2, times))
    forcing_sq = 0.0
    if traj.forcing is not None:
        ops = setup.operators(0, float(times[0]))
        if variant == "uniform":
            per_step = np.array([load_dual_norm(ops, f) ** 2 for f in traj.forcing])
        else:
            m_lu = spla.splu(setup.M.tocsc())
            per_step = np.array([max(float(f @ m_lu.solve(f)), 0.0) for f in traj.forcing])
        forcing_sq = float(np.sum(dt * per_step))

    initial = float(traj.E_H2[0])
    energy_lhs = float(np.max(traj.E_H2) + state_v)
    energy_rhs = initial + forcing_sq
    weight = 1.0
    if variant == "uniform":
        weight = 1.0 + 1.0 / window + nab_norm(setup.reaction, setup.convection)
    obs_lhs = initial - forcing_sq
    obs_rhs = weight * state_v
    return EnergyObservabilityReport(
        variant=variant,
        energy_lhs=energy_lhs,
        energy_rhs=energy_rhs,
        c_energy=energy_lhs / energy_rhs if energy_rhs > 0 else 0.0,
        observability_lhs=initial,
        observability_rhs=obs_rhs,
        observability_ratio=max(obs_lhs, 0.0) / obs_rhs if obs_rhs > 0 else 0.0,
    )
