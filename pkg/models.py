"""
Pydantic models for experiment configuration and API responses
"""
import math
from typing import Dict, List, Literal, Optional, Union

from pydantic import BaseModel, Field, field_validator

MIN_CELLS = 4


def _is_multiple(value: float, step: float) -> bool:
    ratio = value / step
    return abs(ratio - round(ratio)) <= 1e-9 * max(1.0, ratio) and round(ratio) >= 1


class DomainConfig(BaseModel):
    """Rectangle (0, L_1) x ... x (0, L_d) and its uniform grid"""
    d: Literal[1, 2] = Field(default=1, description="Spatial dimension")
    L: Union[float, List[float]] = Field(default=1.0, description="Side lengths (scalar or one per dimension)")
    n_cells: Union[int, List[int]] = Field(default=512, description="Cells per dimension")

    @field_validator("L")
    @classmethod
    def validate_lengths(cls, v):
        values = v if isinstance(v, list) else [v]
        if any(length <= 0 for length in values):
            raise ValueError("side lengths must be positive")
        return v

    @field_validator("n_cells")
    @classmethod
    def validate_cells(cls, v):
        values = v if isinstance(v, list) else [v]
        if any(c < MIN_CELLS for c in values):
            raise ValueError(f"n_cells must be >= {MIN_CELLS}")
        return v

    def lengths(self) -> List[float]:
        return list(self.L) if isinstance(self.L, list) else [float(self.L)] * self.d

    def cells(self) -> List[int]:
        return list(self.n_cells) if isinstance(self.n_cells, list) else [int(self.n_cells)] * self.d


class SpatialFunctionConfig(BaseModel):
    """Analytic function of x used for nu0 and psi_j"""
    kind: Literal["constant", "sine_mode", "decaying_sine"] = "constant"
    value: float = 1.0
    mode: List[int] = Field(default_factory=lambda: [1], description="Sine mode per dimension (sine_mode)")
    index: int = Field(default=1, ge=1, description="Series index j (decaying_sine)")
    decay: float = Field(default=2.0, ge=0.0, description="Decay exponent q in j^-q (decaying_sine)")


class SeriesConfig(BaseModel):
    """Default psi_j = amplitude * j^-decay * sin(j pi x / L)"""
    count: int = Field(default=4, ge=1)
    amplitude: float = Field(default=0.2)
    decay: float = Field(default=2.0, ge=0.0)


class FieldConfig(BaseModel):
    family: Literal["uniform_affine", "truncated_lognormal", "lognormal"] = "uniform_affine"
    nu0: SpatialFunctionConfig = Field(default_factory=SpatialFunctionConfig)
    psi: Optional[List[SpatialFunctionConfig]] = Field(
        default=None, description="Explicit psi_j; the decaying series is used when omitted"
    )
    series: SeriesConfig = Field(default_factory=SeriesConfig)
    kappa: float = Field(default=1.0, gt=0.0, description="Uniform-affine budget parameter")
    trunc_lo: float = Field(default=-2.0, lt=0.0)
    trunc_hi: float = Field(default=2.0, gt=0.0)


class ActuatorConfig(BaseModel):
    N: int = Field(default=3, ge=0, description="Actuators per dimension")
    r: float = Field(default=0.5, gt=0.0, lt=1.0, description="Support-to-cell ratio")
    candidates: List[int] = Field(default_factory=lambda: list(range(1, 9)), description="N values for the beta table")
    auto_select: bool = Field(default=False, description="Replace N by the smallest admissible N*")

    @field_validator("candidates")
    @classmethod
    def validate_candidates(cls, v):
        if not v or any(n < 1 for n in v):
            raise ValueError("candidates must be a non-empty list of positive integers")
        return sorted(set(v))


class ReactionConfig(BaseModel):
    kind: Literal["constant", "time_periodic", "space_cosine"] = "constant"
    value: float = -4.0
    amplitude: float = 0.0
    frequency: float = 0.0


class ConvectionConfig(BaseModel):
    kind: Literal["zero", "constant", "time_periodic"] = "zero"
    vector: List[float] = Field(default_factory=list)
    amplitude: float = 0.0
    frequency: float = 0.0


class InitialStateConfig(BaseModel):
    profile: float = Field(default=1.0, description="Weight of the first sine mode")
    noise: float = Field(default=0.0, ge=0.0, description="Weight of the random sine series")
    n_modes: int = Field(default=4, ge=1)
    decay: float = Field(default=1.0, ge=0.0)
    shared_seed: bool = Field(default=False, description="Same random series for every sample")


class DynamicsConfig(BaseModel):
    dt: float = Field(default=0.01, gt=0.0)
    t_end: float = Field(default=2.0, gt=0.0)
    scheme: Literal["implicit_euler", "crank_nicolson"] = "implicit_euler"
    feedback_coupling: Literal["implicit", "explicit"] = "explicit"
    reaction: ReactionConfig = Field(default_factory=ReactionConfig)
    convection: ConvectionConfig = Field(default_factory=ConvectionConfig)
    initial_state: InitialStateConfig = Field(default_factory=InitialStateConfig)
    gain_variant: Literal["general", "bounded_reaction"] = "bounded_reaction"
    mu: float = Field(default=1.0, ge=0.0, description="Target decay rate")
    lam: Optional[float] = Field(default=None, ge=0.0, description="Feedback gain; lambda* when omitted")
    c_emb: Optional[float] = Field(default=None, ge=0.0, description="Embedding constant; calibrated when omitted")
    c_emb_safety: float = Field(default=1.5, ge=1.0)


class OcpConfig(BaseModel):
    T: float = Field(default=0.5, gt=0.0, description="Horizon length")
    ell: Literal["H", "V"] = Field(default="H", description="Running cost |y|_H^2 or |y|_V^2")
    beta_penalty: float = Field(default=0.01, ge=0.0, description="Control weight")
    control_mode: Literal["deterministic", "stochastic"] = "stochastic"
    cg_tol: float = Field(default=1e-8, gt=0.0)
    cg_max_iter: int = Field(default=500, ge=1)
    v_inf_factor: float = Field(default=4.0, ge=1.0, description="V_inf surrogate horizon / largest tested T")


class RhcConfig(BaseModel):
    delta: float = Field(default=0.1, gt=0.0, description="Sampling time")
    T: float = Field(default=0.5, gt=0.0, description="Prediction horizon")
    n_cycles: int = Field(default=20, ge=1)
    mode: Literal["stochastic", "lognormal"] = "stochastic"
    horizons: List[float] = Field(default_factory=lambda: [0.25, 0.5, 1.0], description="Horizons for the alpha sweep")


class EnsembleConfig(BaseModel):
    S: int = Field(default=16, ge=1, description="Number of samples")
    master_seed: int = Field(default=20240601, ge=0, lt=2 ** 64)


class RiskConfig(BaseModel):
    N_bar: List[int] = Field(default_factory=lambda: list(range(1, 7)))
    S_indicator: int = Field(default=10000, ge=100)
    S_moment: int = Field(default=4000, ge=2)
    kappa0: Optional[float] = Field(default=None, gt=0.0)
    kappa_rel_tol: float = Field(default=0.1, gt=0.0)
    p_order: float = Field(default=1.0, ge=1.0)


class ExperimentConfig(BaseModel):
    """Complete experiment description; every section has defaults"""
    name: str = "experiment"
    domain: DomainConfig = Field(default_factory=DomainConfig)
    field: FieldConfig = Field(default_factory=FieldConfig)
    actuators: ActuatorConfig = Field(default_factory=ActuatorConfig)
    dynamics: DynamicsConfig = Field(default_factory=DynamicsConfig)
    ocp: OcpConfig = Field(default_factory=OcpConfig)
    rhc: RhcConfig = Field(default_factory=RhcConfig)
    ensemble: EnsembleConfig = Field(default_factory=EnsembleConfig)
    risk: RiskConfig = Field(default_factory=RiskConfig)

    def consistency_issues(self) -> List[str]:
        """Cross-field invariants as "<field.path>: message" strings."""
        issues = []
        d = self.domain.d
        lengths, cells = self.domain.lengths(), self.domain.cells()
        if len(lengths) != d:
            issues.append(f"domain.L: expected {d} lengths, got {len(lengths)}")
        if len(cells) != d:
            issues.append(f"domain.n_cells: expected {d} entries, got {len(cells)}")

        dt = self.dynamics.dt
        if not _is_multiple(self.dynamics.t_end, dt):
            issues.append(f"dynamics.t_end: {self.dynamics.t_end} is not a multiple of dt = {dt}")
        if not _is_multiple(self.ocp.T, dt):
            issues.append(f"ocp.T: {self.ocp.T} is not a multiple of dt = {dt}")
        if not _is_multiple(self.rhc.delta, dt):
            issues.append(f"rhc.delta: {self.rhc.delta} is not a multiple of dt = {dt}")
        if self.rhc.T < self.rhc.delta:
            issues.append(f"rhc.T: horizon {self.rhc.T} is shorter than delta = {self.rhc.delta}")
        if not _is_multiple(self.rhc.T, dt):
            issues.append(f"rhc.T: {self.rhc.T} is not a multiple of dt = {dt}")
        for i, T in enumerate(self.rhc.horizons):
            if T < self.rhc.delta or not _is_multiple(T, dt):
                issues.append(f"rhc.horizons[{i}]: {T} must be >= delta and a multiple of dt")

        if len(lengths) == d and len(cells) == d:
            counts = {"actuators.N": [self.actuators.N]} if self.actuators.N else {}
            counts["actuators.candidates"] = self.actuators.candidates
            counts["risk.N_bar"] = self.risk.N_bar
            for path, values in counts.items():
                for N in values:
                    for n in range(d):
                        h = lengths[n] / cells[n]
                        if self.actuators.r * lengths[n] / N < 2 * h - 1e-12:
                            issues.append(f"{path}: N = {N} gives supports narrower than 2h in dimension {n}")
                            break
                        if N > cells[n] // 2:
                            issues.append(f"{path}: N = {N} eigenmodes are not resolved by {cells[n]} cells")
                            break

        family, mode = self.field.family, self.rhc.mode
        if family == "lognormal" and mode != "lognormal":
            issues.append("rhc.mode: the log-normal field family runs the 'lognormal' loop")
        if family != "lognormal" and mode == "lognormal":
            issues.append(f"rhc.mode: the 'lognormal' loop needs the log-normal field family, got {family!r}")
        convection_zero = self.dynamics.convection.kind == "zero" or not any(self.dynamics.convection.vector)
        if mode == "lognormal":
            if not convection_zero:
                issues.append("dynamics.convection: the log-normal loop requires b = 0")
            if self.ocp.ell != "V":
                issues.append("ocp.ell: the log-normal loop uses the V-norm running cost")
            if self.ocp.control_mode != "deterministic":
                issues.append("ocp.control_mode: the log-normal loop uses deterministic controls")
        if self.dynamics.gain_variant == "bounded_reaction" and not convection_zero:
            issues.append("dynamics.gain_variant: 'bounded_reaction' requires b = 0")
        if self.ocp.beta_penalty <= 0:
            issues.append("ocp.beta_penalty: must be positive for value-function results")
        if family == "truncated_lognormal" and not math.isfinite(self.field.trunc_hi - self.field.trunc_lo):
            issues.append("field.trunc_lo: truncation bounds must be finite")
        return issues


# --------- Responses ------------------------------------------------------------

class ValidationResponse(BaseModel):
    valid: bool
    issues: List[str] = Field(default_factory=list)


class BetaRow(BaseModel):
    N: int
    beta_N: float
    c_beta_fit: Optional[float] = None


class BetaResponse(BaseModel):
    rows: List[BetaRow]
    exponent: Optional[float] = None
    c_beta_fit: Optional[float] = None
    r_squared: Optional[float] = None
    c_beta_lower: Optional[float] = None
    tail_exponent: Optional[float] = Field(default=None, description="Slope over the upper half of the N values")
    tail_min_N: Optional[int] = None


class FailProbRow(BaseModel):
    N_bar: int
    beta: float
    p_empirical: float = Field(..., ge=0.0, le=1.0)
    ci_lo: float
    ci_hi: float
    p_bound: float = Field(..., ge=0.0, description="Analytic upper bound; may exceed 1")
    variant: str
    vacuous: bool


class FailProbResponse(BaseModel):
    family: str
    kappa0: Optional[float] = None
    rows: List[FailProbRow]


class SeriesRow(BaseModel):
    t: float
    E_H2: float
    E_V2: float
    H2_q05: float
    H2_q50: float
    H2_q95: float


class SimulateResponse(BaseModel):
    summary: Dict[str, Union[float, int, str, bool, None]]
    series: List[SeriesRow]
