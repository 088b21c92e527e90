"""
Random diffusion coefficients nu(omega, x) and random initial states.

Three parametric families are supported:

* uniform-affine:        nu = nu0 + sum_j z_j psi_j,        z_j ~ U[-1, 1]
* truncated log-normal:  nu = nu0 + exp(sum_j z_j psi_j),   z_j ~ N(0,1) truncated to [lo, hi]
* log-normal series:     nu = exp(sum_j z_j psi_j),         z_j ~ N(0,1)

Every realization carries closed-form bounds nu_min <= nu <= nu_max written in
terms of the tail functional Gamma = sum_j |z_j| * ||psi_j||_inf.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import ClassVar, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import ndtr, ndtri

from errors import FieldSpecError
from mesh_fem import RectGrid

logger = logging.getLogger(__name__)

SEED_MASK = (1 << 64) - 1
INITIAL_STATE_STREAM = 1


# --------- Spatial functions ----------------------------------------------------

@dataclass(frozen=True)
class SpatialFunction:
    """Node-evaluable analytic function: constant, sine_mode or decaying_sine."""

    kind: str = "constant"
    value: float = 1.0
    mode: Tuple[int, ...] = (1,)
    index: int = 1
    decay: float = 2.0

    def evaluate(self, points: np.ndarray, L: Sequence[float]) -> np.ndarray:
        if self.kind == "constant":
            return np.full(points.shape[0], self.value, dtype=float)
        if self.kind == "sine_mode":
            modes = tuple(self.mode) + (self.mode[-1],) * (len(L) - len(self.mode))
            return self.value * _sine_product(points, L, modes)
        if self.kind == "decaying_sine":
            modes = (self.index,) * len(L)
            return self.value * self.index ** (-self.decay) * _sine_product(points, L, modes)
        raise FieldSpecError(f"unknown spatial function kind: {self.kind}", module="random_fields")


def _sine_product(points: np.ndarray, L: Sequence[float], modes: Sequence[int]) -> np.ndarray:
    out = np.ones(points.shape[0])
    for n, length in enumerate(L):
        out *= np.sin(modes[n] * np.pi * points[:, n] / length)
    return out


def decaying_series(count: int, amplitude: float, decay: float) -> Tuple[SpatialFunction, ...]:
    """psi_j = c * j^-q * sin(j pi x / L), j = 1..count."""
    return tuple(
        SpatialFunction(kind="decaying_sine", value=amplitude, index=j, decay=decay)
        for j in range(1, count + 1)
    )


# --------- Field families -------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FieldNorms:
    psi_sup: np.ndarray
    nu0_inf: float
    nu0_sup: float

    def gamma(self, z: np.ndarray) -> float:
        return float(np.abs(np.asarray(z)) @ self.psi_sup)


@dataclass(frozen=True)
class UniformAffineField:
    nu0: SpatialFunction
    psi: Tuple[SpatialFunction, ...]
    kappa: float

    family: ClassVar[str] = "uniform_affine"

    @property
    def J_trunc(self) -> int:
        return len(self.psi)

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=self.J_trunc)

    def admissible(self, z: np.ndarray) -> bool:
        return bool(np.all(np.abs(z) <= 1.0))

    def transform(self, nu0: np.ndarray, series: np.ndarray) -> np.ndarray:
        return nu0 + series

    def bounds(self, gamma: float, norms: FieldNorms) -> Tuple[float, float]:
        return norms.nu0_inf - gamma, norms.nu0_sup + gamma

    def bracket(self, norms: FieldNorms) -> Tuple[float, float]:
        return norms.nu0_inf / (1.0 + self.kappa), norms.nu0_sup + float(norms.psi_sup.sum())

    def check(self, norms: FieldNorms) -> None:
        if self.kappa <= 0:
            raise FieldSpecError("kappa must be positive", module="random_fields")
        if norms.nu0_inf <= 0:
            raise FieldSpecError(f"essinf nu0 must be positive, got {norms.nu0_inf:.6g}", module="random_fields")
        budget = self.kappa / (1.0 + self.kappa) * norms.nu0_inf
        total = float(norms.psi_sup.sum())
        if total > budget * (1.0 + 1e-12):
            raise FieldSpecError(
                f"sum of ||psi_j||_inf = {total:.6g} exceeds kappa/(1+kappa)*nu* = {budget:.6g}",
                module="random_fields",
            )


@dataclass(frozen=True)
class TruncatedLogNormalField:
    nu0: SpatialFunction
    psi: Tuple[SpatialFunction, ...]
    trunc_lo: float = -2.0
    trunc_hi: float = 2.0

    family: ClassVar[str] = "truncated_lognormal"

    @property
    def J_trunc(self) -> int:
        return len(self.psi)

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        # inverse CDF restricted to [lo, hi]
        lo, hi = ndtr(self.trunc_lo), ndtr(self.trunc_hi)
        u = rng.random(self.J_trunc)
        return np.clip(ndtri(lo + u * (hi - lo)), self.trunc_lo, self.trunc_hi)

    def admissible(self, z: np.ndarray) -> bool:
        return bool(np.all((z >= self.trunc_lo) & (z <= self.trunc_hi)))

    def transform(self, nu0: np.ndarray, series: np.ndarray) -> np.ndarray:
        return nu0 + np.exp(series)

    def bounds(self, gamma: float, norms: FieldNorms) -> Tuple[float, float]:
        return norms.nu0_inf + math.exp(-gamma), norms.nu0_sup + math.exp(gamma)

    def bracket(self, norms: FieldNorms) -> Tuple[float, float]:
        reach = max(abs(self.trunc_lo), abs(self.trunc_hi))
        return norms.nu0_inf, norms.nu0_sup + math.exp(reach * float(norms.psi_sup.sum()))

    def check(self, norms: FieldNorms) -> None:
        if self.J_trunc < 1:
            raise FieldSpecError("truncated log-normal field needs at least one psi_j", module="random_fields")
        if not self.trunc_lo < 0.0 < self.trunc_hi:
            raise FieldSpecError("truncation bounds must satisfy lo < 0 < hi", module="random_fields")
        if norms.nu0_inf <= 0:
            raise FieldSpecError(f"essinf nu0 must be positive, got {norms.nu0_inf:.6g}", module="random_fields")


@dataclass(frozen=True)
class LogNormalField:
    psi: Tuple[SpatialFunction, ...]

    family: ClassVar[str] = "lognormal"

    @property
    def J_trunc(self) -> int:
        return len(self.psi)

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal(self.J_trunc)

    def admissible(self, z: np.ndarray) -> bool:
        return bool(np.all(np.isfinite(z)))

    def transform(self, nu0: np.ndarray, series: np.ndarray) -> np.ndarray:
        return np.exp(series)

    def bounds(self, gamma: float, norms: FieldNorms) -> Tuple[float, float]:
        return math.exp(-gamma), math.exp(gamma)

    def bracket(self, norms: FieldNorms) -> Optional[Tuple[float, float]]:
        return None

    def check(self, norms: FieldNorms) -> None:
        if self.J_trunc < 1:
            raise FieldSpecError("log-normal series needs at least one psi_j", module="random_fields")


FieldSpec = Union[UniformAffineField, TruncatedLogNormalField, LogNormalField]


@dataclass(frozen=True, eq=False)
class SampleVector:
    z: np.ndarray
    seed: int


@dataclass(frozen=True, eq=False)
class FieldRealization:
    nu_values: np.ndarray
    nu_cells: np.ndarray
    nu_min: float
    nu_max: float
    gamma: float


# --------- Operations -----------------------------------------------------------

@lru_cache(maxsize=64)
def _psi_table(spec: FieldSpec, grid: RectGrid) -> np.ndarray:
    points = grid.sample_points
    if not spec.psi:
        return np.zeros((0, points.shape[0]))
    return np.stack([psi.evaluate(points, grid.L) for psi in spec.psi])


@lru_cache(maxsize=64)
def _nu0_values(spec: FieldSpec, grid: RectGrid) -> np.ndarray:
    nu0 = getattr(spec, "nu0", None)
    if nu0 is None:
        return np.zeros(grid.sample_points.shape[0])
    return nu0.evaluate(grid.sample_points, grid.L)


@lru_cache(maxsize=64)
def field_norms(spec: FieldSpec, grid: RectGrid) -> FieldNorms:
    """Grid-evaluated sup-norms of psi_j and inf/sup of nu0 (nodes and cell midpoints)."""
    psi = _psi_table(spec, grid)
    nu0 = _nu0_values(spec, grid)
    return FieldNorms(
        psi_sup=np.max(np.abs(psi), axis=1) if psi.size else np.zeros(0),
        nu0_inf=float(nu0.min()),
        nu0_sup=float(nu0.max()),
    )


def check_spec(spec: FieldSpec, grid: RectGrid) -> FieldNorms:
    norms = field_norms(spec, grid)
    spec.check(norms)
    return norms


def nu_bracket(spec: FieldSpec, grid: RectGrid) -> Optional[Tuple[float, float]]:
    """Deterministic (nu_lower, nu_upper) when the family has one."""
    return spec.bracket(check_spec(spec, grid))


def sample_seed(master_seed: int, index: int, stream: int = 0) -> int:
    """Counter-based per-sample seed."""
    entropy = [int(master_seed) & SEED_MASK, int(index), int(stream)]
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0])


def sample(spec: FieldSpec, seed: int) -> SampleVector:
    rng = np.random.default_rng(int(seed) & SEED_MASK)
    return SampleVector(z=spec.draw(rng), seed=int(seed))


def realize(spec: FieldSpec, z: SampleVector, grid: RectGrid) -> FieldRealization:
    coords = np.asarray(z.z, dtype=float)
    if coords.shape != (spec.J_trunc,):
        raise FieldSpecError(
            f"sample has {coords.size} coordinates, spec expects {spec.J_trunc}", module="random_fields"
        )
    if not spec.admissible(coords):
        raise FieldSpecError("sample coordinates outside the family's support", module="random_fields")
    norms = check_spec(spec, grid)
    series = coords @ _psi_table(spec, grid) if spec.J_trunc else np.zeros(grid.sample_points.shape[0])
    values = spec.transform(_nu0_values(spec, grid), series)
    gamma = norms.gamma(coords)
    nu_min, nu_max = spec.bounds(gamma, norms)
    if nu_min <= 0:
        raise FieldSpecError(f"computed nu_min = {nu_min:.6g} is not positive", module="random_fields")
    n = grid.n_nodes
    return FieldRealization(
        nu_values=values[:n],
        nu_cells=values[n:],
        nu_min=nu_min,
        nu_max=nu_max,
        gamma=gamma,
    )


@dataclass(frozen=True, eq=False)
class Ensemble:
    """Frozen sample set reused by every computation of a run."""

    spec: FieldSpec
    grid: RectGrid
    master_seed: int
    samples: Tuple[SampleVector, ...]
    realizations: Tuple[FieldRealization, ...]

    @property
    def size(self) -> int:
        return len(self.samples)

    @property
    def gammas(self) -> np.ndarray:
        return np.array([r.gamma for r in self.realizations])

    @property
    def nu_mins(self) -> np.ndarray:
        return np.array([r.nu_min for r in self.realizations])

    @property
    def nu_maxs(self) -> np.ndarray:
        return np.array([r.nu_max for r in self.realizations])

    def expectation(self, values) -> np.ndarray:
        """Equal-weight average over samples (axis 0), numpy pairwise summation."""
        stacked = np.asarray(values, dtype=float)
        if stacked.shape[0] != self.size:
            raise ValueError(f"expected {self.size} per-sample values, got {stacked.shape[0]}")
        return np.sum(stacked, axis=0) / self.size

    def bracket(self) -> Tuple[float, float]:
        """(nu_lower, nu_upper): deterministic when the family has one, else ensemble extremes."""
        deterministic = self.spec.bracket(field_norms(self.spec, self.grid))
        if deterministic is not None:
            return deterministic
        return float(self.nu_mins.min()), float(self.nu_maxs.max())


def build_ensemble(spec: FieldSpec, grid: RectGrid, S: int, master_seed: int) -> Ensemble:
    if S < 1:
        raise FieldSpecError(f"ensemble size must be >= 1, got {S}", module="random_fields")
    check_spec(spec, grid)
    samples = tuple(sample(spec, sample_seed(master_seed, s)) for s in range(S))
    realizations = tuple(realize(spec, z, grid) for z in samples)
    ensemble = Ensemble(spec, grid, int(master_seed), samples, realizations)
    logger.info(
        "ensemble %s: S=%d, nu_min in [%.4g, %.4g], mean Gamma %.4g",
        spec.family, S, ensemble.nu_mins.min(), ensemble.nu_mins.max(), ensemble.gammas.mean(),
    )
    return ensemble


def sample_gammas(spec: FieldSpec, grid: RectGrid, S: int, master_seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """(Gamma, nu_min) for S fresh samples without building full realizations."""
    norms = check_spec(spec, grid)
    gammas = np.empty(S)
    nu_mins = np.empty(S)
    for s in range(S):
        z = sample(spec, sample_seed(master_seed, s)).z
        gammas[s] = norms.gamma(z)
        nu_mins[s] = spec.bounds(gammas[s], norms)[0]
    return gammas, nu_mins


# --------- Random initial states ------------------------------------------------

@dataclass(frozen=True)
class InitialStateSpec:
    """y0 = profile * e_1-shape + noise * sum_k xi_k k^-decay sin(k pi x / L)."""

    profile: float = 1.0
    noise: float = 0.0
    n_modes: int = 4
    decay: float = 1.0
    shared_seed: bool = False


def initial_state(grid: RectGrid, spec: InitialStateSpec, seed: int) -> np.ndarray:
    points = grid.nodes
    y0 = spec.profile * _sine_product(points, grid.L, (1,) * grid.d)
    if spec.noise:
        rng = np.random.default_rng(int(seed) & SEED_MASK)
        xi = rng.standard_normal(spec.n_modes)
        for k in range(1, spec.n_modes + 1):
            y0 = y0 + spec.noise * xi[k - 1] * k ** (-spec.decay) * _sine_product(points, grid.L, (k,) * grid.d)
    return y0


def build_initial_states(grid: RectGrid, spec: InitialStateSpec, ensemble: Ensemble) -> np.ndarray:
    """One initial state per sample, shape (S, n); independent stream from the field draws."""
    states = []
    for s in range(ensemble.size):
        index = 0 if spec.shared_seed else s
        states.append(initial_state(grid, spec, sample_seed(ensemble.master_seed, index, INITIAL_STATE_STREAM)))
    return np.stack(states)


# --------- Moments of Gamma -----------------------------------------------------

@dataclass(frozen=True)
class GammaMoments:
    """Monte Carlo means of Gamma, exp(Gamma) and exp(kappa Gamma^2) with standard errors."""

    samples: int
    mean_gamma: float
    se_gamma: float
    mean_exp_gamma: float
    se_exp_gamma: float
    kappa: Optional[float] = None
    mean_exp_kappa_gamma2: Optional[float] = None
    se_exp_kappa_gamma2: Optional[float] = None


def _mean_se(values: np.ndarray) -> Tuple[float, float]:
    mean = float(np.sum(values) / values.size)
    se = float(np.std(values, ddof=1) / math.sqrt(values.size)) if values.size > 1 else float("inf")
    return mean, se


def gamma_moments(
    spec: FieldSpec, grid: RectGrid, S: int, master_seed: int, kappa: Optional[float] = None
) -> GammaMoments:
    gammas, _ = sample_gammas(spec, grid, S, master_seed)
    mean_g, se_g = _mean_se(gammas)
    with np.errstate(over="ignore"):
        mean_e, se_e = _mean_se(np.exp(gammas))
        mean_k = se_k = None
        if kappa is not None:
            mean_k, se_k = _mean_se(np.exp(kappa * gammas ** 2))
    return GammaMoments(S, mean_g, se_g, mean_e, se_e, kappa, mean_k, se_k)
