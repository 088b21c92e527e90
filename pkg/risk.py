"""
Failure probabilities of the gain-selection inequality and their Markov and
Fernique-type upper bounds.

A realization fails for the actuator parameter N_bar when
  uniform:    nu_min^2 beta_Nbar <= 3 c^2 N(a,b)^2
  lognormal:  nu_min   beta_Nbar <= 3 ||a||_inf
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from errors import AssumptionViolated, ConfigError, KappaTooLarge
from mesh_fem import RectGrid
from random_fields import (
    FieldSpec,
    LogNormalField,
    TruncatedLogNormalField,
    UniformAffineField,
    check_spec,
    gamma_moments,
    sample_gammas,
)
from spectral_actuators import SpectralGap

logger = logging.getLogger(__name__)

MIN_INDICATOR_SAMPLES = 100
KAPPA_LADDER = tuple(2.0 ** -k for k in range(0, 11))


@dataclass(frozen=True)
class FailureCriterion:
    variant: Literal["uniform", "lognormal"]
    N_bar: int
    c_emb: float
    Nab: float
    beta_Nbar: float

    def __post_init__(self):
        if self.variant not in ("uniform", "lognormal"):
            raise ConfigError(f"unknown failure criterion {self.variant!r}", module="risk")
        if self.beta_Nbar <= 0 or self.N_bar < 1:
            raise ConfigError("failure criterion needs beta_Nbar > 0 and N_bar >= 1", module="risk")

    @property
    def nu_threshold(self) -> float:
        """Realizations with nu_min at or below this value fail."""
        if self.variant == "uniform":
            return math.sqrt(3.0) * self.c_emb * self.Nab / math.sqrt(self.beta_Nbar)
        return 3.0 * self.Nab / self.beta_Nbar

    def fails(self, nu_min: np.ndarray) -> np.ndarray:
        nu_min = np.asarray(nu_min, dtype=float)
        if self.variant == "uniform":
            return nu_min ** 2 * self.beta_Nbar <= 3.0 * (self.c_emb * self.Nab) ** 2
        return nu_min * self.beta_Nbar <= 3.0 * self.Nab


@dataclass(frozen=True)
class FailureEstimate:
    failures: int
    samples: int
    p: float
    ci_lo: float
    ci_hi: float

    @property
    def half_width(self) -> float:
        return 0.5 * (self.ci_hi - self.ci_lo)


@dataclass(frozen=True)
class BoundReport:
    family: str
    variant: str
    N_bar: int
    beta: float
    p_empirical: float
    ci_lo: float
    ci_hi: float
    p_bound: float
    moments: Dict[str, float] = field(default_factory=dict)
    kappa0: Optional[float] = None
    poly_bound: Optional[float] = None
    C_p: Optional[float] = None

    @property
    def vacuous(self) -> bool:
        return self.p_bound > 1.0

    @property
    def dominates(self) -> bool:
        return self.p_bound >= self.p_empirical - 0.5 * (self.ci_hi - self.ci_lo)


def wilson_interval(successes: int, total: int, z: float = 1.96) -> Tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if total <= 0:
        return 0.0, 1.0
    p = successes / total
    z2 = z * z
    denom = 1.0 + z2 / total
    center = (p + z2 / (2.0 * total)) / denom
    margin = z * math.sqrt(p * (1.0 - p) / total + z2 / (4.0 * total * total)) / denom
    return max(0.0, center - margin), min(1.0, center + margin)


def empirical_failure(spec: FieldSpec, grid: RectGrid, criterion: FailureCriterion, S: int, seed: int) -> FailureEstimate:
    if S < MIN_INDICATOR_SAMPLES:
        raise ConfigError(f"empirical failure needs S >= {MIN_INDICATOR_SAMPLES}, got {S}", module="risk")
    _, nu_mins = sample_gammas(spec, grid, S, seed)
    failures = int(np.count_nonzero(criterion.fails(nu_mins)))
    lo, hi = wilson_interval(failures, S)
    return FailureEstimate(failures=failures, samples=S, p=failures / S, ci_lo=lo, ci_hi=hi)


def bound_uniform_ex1(
    spec: TruncatedLogNormalField, grid: RectGrid, criterion: FailureCriterion, S_moment: int, seed: int
) -> Tuple[float, Dict[str, float]]:
    """E[exp(Gamma)] * (sqrt(3) c N(a,b) beta^-1/2 - nu_lower), zero when the bracket is negative."""
    if criterion.variant != "uniform":
        raise ConfigError("the truncated log-normal bound uses the uniform criterion", module="risk")
    norms = check_spec(spec, grid)
    bracket = criterion.nu_threshold - norms.nu0_inf
    moments = gamma_moments(spec, grid, S_moment, seed)
    stats = {"E_exp_gamma": moments.mean_exp_gamma, "se_exp_gamma": moments.se_exp_gamma}
    if bracket <= 0:
        return 0.0, stats
    return moments.mean_exp_gamma * bracket, stats


def bound_uniform_ex2(
    spec: UniformAffineField, grid: RectGrid, criterion: FailureCriterion
) -> Tuple[float, Dict[str, float]]:
    """E[Gamma] / (nu* - sqrt(3) c N(a,b) beta^-1/2) with E[Gamma] = 1/2 sum ||psi_j||_inf."""
    if criterion.variant != "uniform":
        raise ConfigError("the uniform-affine bound uses the uniform criterion", module="risk")
    norms = check_spec(spec, grid)
    mean_gamma = 0.5 * float(norms.psi_sup.sum())
    denominator = norms.nu0_inf - criterion.nu_threshold
    if denominator <= 0:
        raise AssumptionViolated(
            f"nu* - sqrt(3) c N(a,b) beta^-1/2 = {denominator:.4g} must be positive for N_bar={criterion.N_bar}",
            module="risk",
        )
    return mean_gamma / denominator, {"E_gamma": mean_gamma}


def _log_mean_exp(values: np.ndarray) -> float:
    return float(logsumexp(values) - math.log(values.size))


def select_kappa0(
    spec: LogNormalField,
    grid: RectGrid,
    S: int,
    seed: int,
    rel_tol: float = 0.1,
    ladder: Sequence[float] = KAPPA_LADDER,
) -> float:
    """Largest kappa in the dyadic ladder whose E[exp(kappa Gamma^2)] estimate is stable under doubling S."""
    gammas, _ = sample_gammas(spec, grid, 2 * S, seed)
    for kappa in sorted(ladder, reverse=True):
        if kappa_is_stable(gammas, kappa, S, rel_tol):
            logger.info("kappa0 = %.4g (moment stable within %.0f%% from S=%d to %d)", kappa, 100 * rel_tol, S, 2 * S)
            return kappa
    raise KappaTooLarge(f"no kappa in the ladder down to {min(ladder):.3g} gives a stable moment", module="risk")


def kappa_is_stable(gammas: np.ndarray, kappa: float, S: int, rel_tol: float = 0.1) -> bool:
    log_half = _log_mean_exp(kappa * gammas[:S] ** 2)
    log_full = _log_mean_exp(kappa * gammas ** 2)
    if not (math.isfinite(log_half) and math.isfinite(log_full)):
        return False
    return abs(math.expm1(log_half - log_full)) <= rel_tol


def bound_lognormal(
    spec: LogNormalField,
    grid: RectGrid,
    criterion: FailureCriterion,
    kappa0: float,
    p_order: float,
    S_moment: int,
    seed: int,
    rel_tol: float = 0.1,
) -> Tuple[float, Dict[str, float], float, float]:
    """(bound, moments, polynomial-rate bound, C_p) with bound = E[exp(kappa0 Gamma^2)] exp(-kappa0 log(beta / 3||a||)^2)."""
    if criterion.variant != "lognormal":
        raise ConfigError("the log-normal bound uses the log-normal criterion", module="risk")
    if kappa0 <= 0:
        raise ConfigError(f"kappa0 must be positive, got {kappa0}", module="risk")
    ratio = criterion.beta_Nbar / (3.0 * criterion.Nab) if criterion.Nab > 0 else math.inf
    if ratio < 1.0:
        raise AssumptionViolated(
            f"beta_Nbar = {criterion.beta_Nbar:.4g} is below 3||a||_inf = {3 * criterion.Nab:.4g}", module="risk"
        )
    gammas, _ = sample_gammas(spec, grid, 2 * S_moment, seed)
    if not kappa_is_stable(gammas, kappa0, S_moment, rel_tol):
        raise KappaTooLarge(f"E[exp(kappa0 Gamma^2)] is not stable for kappa0 = {kappa0:.4g}", module="risk")
    log_moment = _log_mean_exp(kappa0 * gammas ** 2)
    moment = math.exp(log_moment)
    C_p = math.exp(-p_order ** 2 / (4.0 * kappa0))
    if math.isinf(ratio):
        return 0.0, {"E_exp_kappa_gamma2": moment}, 0.0, C_p
    x = math.log(ratio)
    bound = math.exp(log_moment - kappa0 * x * x)
    poly = math.exp(log_moment + p_order ** 2 / (4.0 * kappa0) - p_order * x)
    return bound, {"E_exp_kappa_gamma2": moment}, poly, C_p


def fernique_certificate(kappa0: float, p: float, x: np.ndarray) -> np.ndarray:
    """exp(kappa0 log(x)^2) - exp(-p^2 / (4 kappa0)) x^p, nonnegative for x >= 1."""
    x = np.asarray(x, dtype=float)
    log_x = np.log(x)
    return np.exp(kappa0 * log_x ** 2) - np.exp(-p * p / (4.0 * kappa0) + p * log_x)


def failure_sweep(
    spec: FieldSpec,
    grid: RectGrid,
    gaps: Sequence[SpectralGap],
    c_emb: float,
    Nab: float,
    S_indicator: int,
    S_moment: int,
    seed: int,
    kappa0: Optional[float] = None,
    p_order: float = 1.0,
) -> List[BoundReport]:
    """Paired empirical estimate and analytic bound per N_bar; one seed for every N_bar."""
    variant = "lognormal" if spec.family == "lognormal" else "uniform"
    if variant == "lognormal" and kappa0 is None:
        kappa0 = select_kappa0(spec, grid, S_moment, seed)
    reports = []
    for gap in sorted(gaps, key=lambda g: g.N):
        if gap.N < 1:
            continue
        criterion = FailureCriterion(variant, gap.N, c_emb, Nab, gap.beta_N)
        estimate = empirical_failure(spec, grid, criterion, S_indicator, seed)
        poly = C_p = None
        if spec.family == "uniform_affine":
            bound, moments = bound_uniform_ex2(spec, grid, criterion)
        elif spec.family == "truncated_lognormal":
            bound, moments = bound_uniform_ex1(spec, grid, criterion, S_moment, seed)
        else:
            bound, moments, poly, C_p = bound_lognormal(spec, grid, criterion, kappa0, p_order, S_moment, seed)
        report = BoundReport(
            family=spec.family,
            variant=variant,
            N_bar=gap.N,
            beta=gap.beta_N,
            p_empirical=estimate.p,
            ci_lo=estimate.ci_lo,
            ci_hi=estimate.ci_hi,
            p_bound=bound,
            moments=moments,
            kappa0=kappa0 if variant == "lognormal" else None,
            poly_bound=poly,
            C_p=C_p,
        )
        if report.vacuous:
            logger.warning("N_bar=%d: bound %.4g exceeds 1 (vacuous)", gap.N, bound)
        if not report.dominates:
            logger.warning("N_bar=%d: bound %.4g below empirical %.4g", gap.N, bound, estimate.p)
        reports.append(report)
    return reports
