"""Build experiments from a validated config and run the subcommand pipelines.

Each pipeline returns an ``ExperimentOutput``: named pandas DataFrames (one per
CSV artifact) and a JSON-ready summary dict. The CLI writes them to disk, the
HTTP app returns them in the response body.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError

from dynamics import (
    EnsembleStepper,
    FeedbackGain,
    SpatialSetup,
    TimeGrid,
    build_setup,
    calibrate_embedding_constant,
    check_energy_observability,
    feedback_matrix,
    fit_exponential,
    resolve_workers,
    select_gain,
    simulate,
    solve_closed_loop,
    stable_regime_margin,
)
from errors import ConfigError, RhcError
from mesh_fem import ConvectionForm, ReactionForm, RectGrid, build_grid, nab_norm
from models import ExperimentConfig, FieldConfig, SpatialFunctionConfig
from ocp import solve_ocp, value_infinity_surrogate, value_ratio_sweep
from random_fields import (
    INITIAL_STATE_STREAM,
    Ensemble,
    FieldSpec,
    InitialStateSpec,
    LogNormalField,
    SpatialFunction,
    TruncatedLogNormalField,
    UniformAffineField,
    build_ensemble,
    build_initial_states,
    check_spec,
    decaying_series,
)
from rhc import horizon_config, horizon_sweep, run_rhc_lognormal, run_rhc_stochastic, suboptimality_report
from risk import failure_sweep
from spectral_actuators import (
    ActuatorSet,
    SpectralGap,
    beta_grid_convergence,
    beta_table,
    build_actuators,
    fit_beta_scaling,
)

logger = logging.getLogger(__name__)

SUBCOMMANDS = ("simulate", "ocp", "rhc", "beta", "failprob", "validate")
VALUE_RATIO_SAMPLES = 3


@dataclass
class ExperimentOutput:
    frames: Dict[str, pd.DataFrame] = field(default_factory=dict)
    summary: Dict[str, object] = field(default_factory=dict)


# --------- Config loading & validation ------------------------------------------

def _pydantic_issues(exc: ValidationError) -> List[str]:
    return [f"{'.'.join(str(part) for part in err['loc'])}: {err['msg']}" for err in exc.errors()]


def parse_config(data: Union[dict, str]) -> ExperimentConfig:
    """Parse a dict or JSON text; every field error is listed in the ConfigError message."""
    try:
        if isinstance(data, str):
            return ExperimentConfig.model_validate_json(data)
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError("; ".join(_pydantic_issues(exc)), module="cli") from exc


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}", module="cli")
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}", module="cli") from exc
    return parse_config(text)


def with_seed(cfg: ExperimentConfig, seed: Optional[int]) -> ExperimentConfig:
    if seed is None:
        return cfg
    if not 0 <= seed < 2 ** 64:
        raise ConfigError(f"--seed must be an unsigned 64-bit integer, got {seed}", module="cli")
    return cfg.model_copy(update={"ensemble": cfg.ensemble.model_copy(update={"master_seed": seed})})


def canonical_json(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def validate_config(cfg: ExperimentConfig) -> List[str]:
    """All violated invariants reachable from the config, without running any solver."""
    issues = cfg.consistency_issues()
    if issues:
        return issues
    try:
        grid = grid_from(cfg)
    except RhcError as exc:
        return [f"domain: {exc}"]
    try:
        check_spec(field_spec_from(cfg.field), grid)
    except RhcError as exc:
        issues.append(f"field: {exc}")
    counts = {"actuators.N": [cfg.actuators.N], "risk.N_bar": cfg.risk.N_bar}
    for path, values in counts.items():
        for N in values:
            try:
                build_actuators(grid, N, cfg.actuators.r)
            except RhcError as exc:
                issues.append(f"{path}: {exc}")
    return issues


def ensure_valid(cfg: ExperimentConfig) -> None:
    issues = validate_config(cfg)
    if issues:
        raise ConfigError("; ".join(issues), module="cli")


# --------- Config -> library objects --------------------------------------------

def grid_from(cfg: ExperimentConfig) -> RectGrid:
    return build_grid(cfg.domain.d, cfg.domain.lengths(), cfg.domain.cells())


def _function(fn: SpatialFunctionConfig) -> SpatialFunction:
    return SpatialFunction(kind=fn.kind, value=fn.value, mode=tuple(fn.mode), index=fn.index, decay=fn.decay)


def field_spec_from(field_cfg: FieldConfig) -> FieldSpec:
    if field_cfg.psi is not None:
        psi = tuple(_function(fn) for fn in field_cfg.psi)
    else:
        series = field_cfg.series
        psi = decaying_series(series.count, series.amplitude, series.decay)
    nu0 = _function(field_cfg.nu0)
    if field_cfg.family == "uniform_affine":
        return UniformAffineField(nu0=nu0, psi=psi, kappa=field_cfg.kappa)
    if field_cfg.family == "truncated_lognormal":
        return TruncatedLogNormalField(nu0=nu0, psi=psi, trunc_lo=field_cfg.trunc_lo, trunc_hi=field_cfg.trunc_hi)
    return LogNormalField(psi=psi)


def reaction_from(cfg: ExperimentConfig) -> ReactionForm:
    r = cfg.dynamics.reaction
    return ReactionForm(kind=r.kind, value=r.value, amplitude=r.amplitude, frequency=r.frequency)


def convection_from(cfg: ExperimentConfig) -> ConvectionForm:
    b = cfg.dynamics.convection
    return ConvectionForm(kind=b.kind, vector=tuple(b.vector), amplitude=b.amplitude, frequency=b.frequency)


def initial_spec_from(cfg: ExperimentConfig) -> InitialStateSpec:
    s = cfg.dynamics.initial_state
    return InitialStateSpec(profile=s.profile, noise=s.noise, n_modes=s.n_modes, decay=s.decay,
                            shared_seed=s.shared_seed)


def gain_norm(cfg: ExperimentConfig, reaction: ReactionForm, convection: ConvectionForm) -> float:
    """N(a,b) for the general variant, ||a||_inf for the bounded-reaction one."""
    if cfg.dynamics.gain_variant == "bounded_reaction":
        return reaction.sup_abs()
    return nab_norm(reaction, convection)


# --------- Experiment context ---------------------------------------------------

@dataclass(eq=False)
class ExperimentContext:
    cfg: ExperimentConfig
    grid: RectGrid
    spec: FieldSpec
    ensemble: Ensemble
    actuators: ActuatorSet
    setup: SpatialSetup
    y0: np.ndarray
    gaps: List[SpectralGap]
    gain: Optional[FeedbackGain]
    c_emb: float
    stepper: EnsembleStepper
    workers: int

    @property
    def seeds(self) -> Dict[str, int]:
        return {"master_seed": self.ensemble.master_seed, "initial_state_stream": INITIAL_STATE_STREAM}

    @property
    def y0_norm_sq(self) -> float:
        return float(self.ensemble.expectation(np.einsum("sn,sn->s", self.y0, (self.setup.M @ self.y0.T).T)))


def _embedding_constant(cfg: ExperimentConfig, setup: SpatialSetup) -> float:
    if cfg.dynamics.c_emb is not None:
        return cfg.dynamics.c_emb
    return calibrate_embedding_constant(setup, seed=cfg.ensemble.master_seed, safety=cfg.dynamics.c_emb_safety)


def build_context(cfg: ExperimentConfig, workers: Optional[int] = None) -> ExperimentContext:
    """Grid, frozen ensemble, actuators, projectors, gain and a shared stepper."""
    ensure_valid(cfg)
    workers = resolve_workers(workers)
    grid = grid_from(cfg)
    spec = field_spec_from(cfg.field)
    ensemble = build_ensemble(spec, grid, cfg.ensemble.S, cfg.ensemble.master_seed)
    reaction, convection = reaction_from(cfg), convection_from(cfg)
    dyn = cfg.dynamics

    N = cfg.actuators.N
    gaps: List[SpectralGap] = []
    gain = None
    c_emb = 0.0
    if N >= 1 or cfg.actuators.auto_select:
        probe = build_setup(ensemble, build_actuators(grid, 0, cfg.actuators.r), reaction, convection)
        c_emb = _embedding_constant(cfg, probe)
        candidates = cfg.actuators.candidates if cfg.actuators.auto_select else [N]
        gaps = beta_table(grid, candidates, cfg.actuators.r)
        nu_lower, nu_upper = ensemble.bracket()
        gain = select_gain(
            nu_lower, nu_upper, gain_norm(cfg, reaction, convection), dyn.mu, c_emb,
            probe.alpha1, gaps, dyn.gain_variant, dyn.lam,
        )
        N = gain.N_star

    actuators = build_actuators(grid, N, cfg.actuators.r)
    setup = build_setup(ensemble, actuators, reaction, convection, dyn.scheme, dyn.feedback_coupling)
    feedback = feedback_matrix(setup, gain) if gain is not None else None
    stepper = EnsembleStepper(setup, dyn.dt, feedback)
    y0 = build_initial_states(grid, initial_spec_from(cfg), ensemble)
    logger.info("context: grid %s, S=%d, N=%d (N_sigma=%d), workers=%d",
                grid.n_cells, ensemble.size, N, actuators.N_sigma, workers)
    return ExperimentContext(cfg, grid, spec, ensemble, actuators, setup, y0, gaps, gain, c_emb, stepper, workers)


# --------- Summaries ------------------------------------------------------------

def json_ready(value):
    """Plain JSON types with non-finite floats mapped to None."""
    if isinstance(value, dict):
        return {str(k): json_ready(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_ready(v) for v in value]
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer, int)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def _gain_summary(ctx: ExperimentContext) -> Dict[str, object]:
    if ctx.gain is None:
        return {"N": ctx.actuators.N, "lam": 0.0}
    g = ctx.gain
    return {
        "N": g.N_star,
        "lam": g.lam,
        "lambda_star": g.lambda_star,
        "gain_variant": g.variant,
        "beta_N": g.beta_N,
        "beta_threshold": g.beta_threshold,
        "alpha1": g.alpha1,
        "theta_theta": g.theta_theta,
        "theta_phi": g.theta_phi,
        "c_emb": ctx.c_emb,
    }


def _series_frame(traj) -> pd.DataFrame:
    q = traj.h2_quantiles((0.05, 0.5, 0.95))
    return pd.DataFrame({
        "t": traj.times,
        "E_H2": traj.E_H2,
        "E_V2": traj.E_V2,
        "H2_q05": q[0],
        "H2_q50": q[1],
        "H2_q95": q[2],
    })


# --------- Pipelines ------------------------------------------------------------

def run_validate(cfg: ExperimentConfig) -> ExperimentOutput:
    issues = validate_config(cfg)
    return ExperimentOutput(summary={"valid": not issues, "issues": issues})


def run_beta(cfg: ExperimentConfig) -> ExperimentOutput:
    ensure_valid(cfg)
    grid = grid_from(cfg)
    gaps = beta_table(grid, cfg.actuators.candidates, cfg.actuators.r)
    frame = pd.DataFrame({
        "N": [g.N for g in gaps],
        "beta_N": [g.beta_N for g in gaps],
        "c_beta_fit": [g.c_beta_fit for g in gaps],
    })
    summary: Dict[str, object] = {"r": cfg.actuators.r, "n_cells": list(grid.n_cells)}
    if len(gaps) >= 2:
        scaling = fit_beta_scaling(gaps)
        summary.update(exponent=scaling.exponent, c_beta_fit=scaling.c_beta_fit,
                       r_squared=scaling.r_squared, c_beta_lower=scaling.c_beta_lower)
        counts = sorted(g.N for g in gaps if g.N >= 1)
        tail_start = counts[len(counts) // 2]
        if sum(1 for N in counts if N >= tail_start) >= 2:
            summary["tail_exponent"] = fit_beta_scaling(gaps, min_N=tail_start).exponent
            summary["tail_min_N"] = tail_start
    N_check = max(cfg.actuators.candidates)
    try:
        fine, coarse, change = beta_grid_convergence(grid, N_check, cfg.actuators.r)
        summary["grid_check"] = {"N": N_check, "beta_fine": fine, "beta_coarse": coarse, "relative_change": change}
    except RhcError as exc:
        logger.warning("beta grid check skipped: %s", exc)
    return ExperimentOutput(frames={"beta": frame}, summary=json_ready(summary))


def run_simulate(cfg: ExperimentConfig, workers: Optional[int] = None) -> ExperimentOutput:
    ctx = build_context(cfg, workers)
    tgrid = TimeGrid.over(0.0, cfg.dynamics.t_end, cfg.dynamics.dt)
    if ctx.gain is not None:
        traj = solve_closed_loop(ctx.y0, ctx.setup, ctx.gain, tgrid, ctx.stepper, workers=ctx.workers)
    else:
        traj = simulate(ctx.y0, ctx.setup, tgrid, stepper=ctx.stepper, workers=ctx.workers)
    free = simulate(ctx.y0, ctx.setup, tgrid, stepper=ctx.stepper, workers=ctx.workers)
    fit, free_fit = traj.decay(), free.decay()
    variant = "lognormal" if ctx.spec.family == "lognormal" else "uniform"
    report = check_energy_observability(traj, ctx.setup, variant)
    summary = {
        "family": ctx.spec.family,
        "S": ctx.ensemble.size,
        "decay_rate": fit.rate,
        "decay_r_squared": fit.r_squared,
        "uncontrolled_decay_rate": free_fit.rate,
        "energy_violations": traj.energy_violations,
        "stable_regime_margin": stable_regime_margin(ctx.ensemble, ctx.setup.reaction),
        "energy_ratio": report.c_energy,
        "observability_ratio": report.observability_ratio,
        "final_E_H2": float(traj.E_H2[-1]),
        "initial_E_H2": float(traj.E_H2[0]),
        **_gain_summary(ctx),
    }
    return ExperimentOutput(frames={"trajectory": _series_frame(traj)}, summary=json_ready(summary))


def _control_frame(u_values: np.ndarray, mode: str, dt: float) -> pd.DataFrame:
    values = u_values if mode == "stochastic" else u_values[np.newaxis]
    S, K, k = values.shape
    sample, step, actuator = np.meshgrid(np.arange(S), np.arange(K), np.arange(k), indexing="ij")
    frame = pd.DataFrame({
        "sample": sample.ravel(),
        "step": step.ravel(),
        "t": step.ravel() * dt,
        "actuator": actuator.ravel(),
        "u": values.ravel(),
    })
    return frame.drop(columns="sample") if mode == "deterministic" else frame


def run_ocp(cfg: ExperimentConfig, workers: Optional[int] = None) -> ExperimentOutput:
    ctx = build_context(cfg, workers)
    solution = solve_ocp(0.0, ctx.y0, cfg.ocp, ctx.setup, ctx.stepper, workers=ctx.workers)
    history = pd.DataFrame({"iteration": np.arange(len(solution.history)), "residual": solution.history})
    summary = {
        "V_T": solution.V_T,
        "J_zero": solution.J_zero,
        "iterations": solution.iterations,
        "converged": solution.converged,
        "grad_norm": solution.grad_norm,
        "initial_grad_norm": solution.initial_grad_norm,
        "T": cfg.ocp.T,
        "ell": cfg.ocp.ell,
        "control_mode": cfg.ocp.control_mode,
        **_gain_summary(ctx),
    }
    frames = {
        "controls": _control_frame(solution.u_star.values, solution.u_star.mode, solution.u_star.dt),
        "history": history,
        "trajectory": _series_frame(solution.y_star),
    }
    return ExperimentOutput(frames=frames, summary=json_ready(summary))


def run_rhc(cfg: ExperimentConfig, workers: Optional[int] = None) -> ExperimentOutput:
    ctx = build_context(cfg, workers)
    runner = run_rhc_lognormal if cfg.rhc.mode == "lognormal" else run_rhc_stochastic
    result = runner(ctx.y0, ctx.setup, cfg.rhc, cfg.ocp, ctx.stepper, workers=ctx.workers)
    horizon_cfg = horizon_config(cfg.rhc, cfg.ocp)

    T_max = max([cfg.rhc.T] + list(cfg.rhc.horizons))
    v_inf = value_infinity_surrogate(ctx.y0, ctx.setup, horizon_cfg, ctx.stepper, T_max,
                                     cfg.ocp.v_inf_factor, ctx.gain)
    ratios = value_ratio_sweep(ctx.setup, horizon_cfg, ctx.stepper, n_random=VALUE_RATIO_SAMPLES,
                               seed=cfg.ensemble.master_seed)
    report = suboptimality_report(result, v_inf, gamma2_hat=ratios.gamma2_hat, y0_norm_sq=ctx.y0_norm_sq,
                                  beta_penalty=cfg.ocp.beta_penalty)
    sweep = horizon_sweep(ctx.y0, ctx.setup, cfg.rhc, cfg.ocp, cfg.rhc.horizons, ctx.stepper, ctx.workers)

    window = TimeGrid.over(0.0, cfg.rhc.n_cycles * cfg.rhc.delta, cfg.dynamics.dt)
    free = simulate(ctx.y0, ctx.setup, window, stepper=ctx.stepper, workers=ctx.workers)
    free_fit = fit_exponential(free.times, free.E_H2)

    cycles = pd.DataFrame([{
        "k": c.k, "t_k": c.t_k, "V_T": c.V_T, "E_H2": c.E_H2, "E_V2": c.E_V2,
        "u_norm": c.u_norm, "cg_iterations": c.cg_iterations,
    } for c in result.cycles])
    horizons = pd.DataFrame([{
        "T": p.T, "V_T0": p.V_T0, "J_inf_rh": p.J_inf_rh, "alpha_hat": p.alpha_hat,
    } for p in sweep.points])
    decay = result.decay
    summary = {
        "mode": result.mode,
        "completed": result.completed,
        "notes": result.notes,
        "alpha_hat": result.alpha_hat,
        "V_T0": result.V_T0,
        "J_inf_rh": result.J_inf_rh,
        "tail_bound": result.tail_bound,
        "zeta_hat": decay.zeta_hat if decay else None,
        "ce_hat": decay.ce_hat if decay else None,
        "decay_r_squared": decay.r_squared if decay else None,
        "decay_max_residual": decay.max_residual if decay else None,
        "uncontrolled_zeta_hat": free_fit.rate,
        "state_integral": result.state_integral,
        "control_integral": result.control_integral,
        "V_inf_lower": v_inf.lower,
        "V_inf_upper": v_inf.upper,
        "T_big": v_inf.T_big,
        "gamma1_hat": ratios.gamma1_hat,
        "gamma2_hat": ratios.gamma2_hat,
        "checks": {
            "value_below_surrogate": report.value_below_surrogate,
            "cost_above_surrogate": report.cost_above_surrogate,
            "cost_bounds_hold": report.cost_bounds_hold,
            "alpha_in_range": bool(0 < result.alpha_hat <= 1.02) if math.isfinite(result.alpha_hat) else False,
            "alpha_nondecreasing_in_T": sweep.nondecreasing,
            "smallest_positive_T": sweep.smallest_positive_T,
        },
        **_gain_summary(ctx),
    }
    frames = {"cycles": cycles, "trace": _series_frame(result.trace), "horizons": horizons}
    return ExperimentOutput(frames=frames, summary=json_ready(summary))


def run_failprob(cfg: ExperimentConfig) -> ExperimentOutput:
    ensure_valid(cfg)
    grid = grid_from(cfg)
    spec = field_spec_from(cfg.field)
    reaction, convection = reaction_from(cfg), convection_from(cfg)
    seed = cfg.ensemble.master_seed
    if spec.family == "lognormal":
        Nab, c_emb = reaction.sup_abs(), 0.0
    else:
        probe_ensemble = build_ensemble(spec, grid, 1, seed)
        probe = build_setup(probe_ensemble, build_actuators(grid, 0, cfg.actuators.r), reaction, convection)
        Nab, c_emb = nab_norm(reaction, convection), _embedding_constant(cfg, probe)
    gaps = beta_table(grid, cfg.risk.N_bar, cfg.actuators.r)
    reports = failure_sweep(spec, grid, gaps, c_emb, Nab, cfg.risk.S_indicator, cfg.risk.S_moment, seed,
                            cfg.risk.kappa0, cfg.risk.p_order)
    frame = pd.DataFrame([{
        "N_bar": r.N_bar,
        "beta": r.beta,
        "p_empirical": r.p_empirical,
        "ci_lo": r.ci_lo,
        "ci_hi": r.ci_hi,
        "p_bound": r.p_bound,
        "variant": r.variant,
        "vacuous": r.vacuous,
        "poly_bound": r.poly_bound,
    } for r in reports])
    summary: Dict[str, object] = {
        "family": spec.family,
        "c_emb": c_emb,
        "Nab": Nab,
        "kappa0": reports[0].kappa0 if reports else None,
        "C_p": reports[0].C_p if reports else None,
        "moments": reports[0].moments if reports else {},
        "bounds_dominate": all(r.dominates for r in reports),
    }
    positive = [r for r in reports if r.p_bound > 0]
    if len(positive) >= 2:
        fit = np.polyfit(np.log([r.N_bar for r in positive]), np.log([r.p_bound for r in positive]), 1)
        summary["log_bound_slope"] = float(fit[0])
    return ExperimentOutput(frames={"failprob": frame}, summary=json_ready(summary))


def run_subcommand(name: str, cfg: ExperimentConfig, workers: Optional[int] = None) -> ExperimentOutput:
    if name == "validate":
        return run_validate(cfg)
    if name == "beta":
        return run_beta(cfg)
    if name == "failprob":
        return run_failprob(cfg)
    if name == "simulate":
        return run_simulate(cfg, workers)
    if name == "ocp":
        return run_ocp(cfg, workers)
    if name == "rhc":
        return run_rhc(cfg, workers)
    raise ConfigError(f"unknown subcommand {name!r}; choose from {', '.join(SUBCOMMANDS)}", module="cli")
