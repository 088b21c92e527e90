import json
import math

import numpy as np
import pytest

from conftest import CONFIG_DIR
from errors import ConfigError
from experiment_service import (
    build_context,
    canonical_json,
    convection_from,
    field_spec_from,
    gain_norm,
    json_ready,
    load_config,
    parse_config,
    reaction_from,
    run_beta,
    run_failprob,
    run_subcommand,
    run_validate,
    validate_config,
    with_seed,
)
from random_fields import LogNormalField, UniformAffineField


@pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.json")), ids=lambda p: p.stem)
def test_shipped_configs_are_valid(path):
    assert validate_config(load_config(path)) == []


def test_parse_config_lists_field_errors():
    with pytest.raises(ConfigError) as excinfo:
        parse_config({"domain": {"d": 3, "n_cells": 2}})
    message = str(excinfo.value)
    assert "domain.d" in message
    assert "domain.n_cells" in message
    assert excinfo.value.exit_code == 2


def test_parse_config_accepts_json_text():
    cfg = parse_config('{"name": "text", "ensemble": {"S": 3}}')
    assert cfg.name == "text"
    assert cfg.ensemble.S == 3


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.json")


def test_consistency_issues_name_their_fields(small_config_dict):
    small_config_dict["dynamics"]["t_end"] = 0.41
    small_config_dict["rhc"]["T"] = 0.06
    small_config_dict["dynamics"]["convection"] = {"kind": "constant", "vector": [1.0]}
    issues = validate_config(parse_config(small_config_dict))
    assert any(issue.startswith("dynamics.t_end") for issue in issues)
    assert any(issue.startswith("rhc.T") for issue in issues)
    assert any(issue.startswith("dynamics.gain_variant") for issue in issues)


def test_lognormal_family_needs_the_lognormal_loop(small_config_dict):
    small_config_dict["field"]["family"] = "lognormal"
    issues = validate_config(parse_config(small_config_dict))
    assert any(issue.startswith("rhc.mode") for issue in issues)

    small_config_dict["rhc"]["mode"] = "lognormal"
    issues = validate_config(parse_config(small_config_dict))
    assert any(issue.startswith("ocp.ell") for issue in issues)
    assert any(issue.startswith("ocp.control_mode") for issue in issues)


def test_unresolved_actuators_are_reported(small_config_dict):
    small_config_dict["actuators"]["candidates"] = [1, 2, 9]
    issues = validate_config(parse_config(small_config_dict))
    assert any(issue.startswith("actuators.candidates") and "N = 9" in issue for issue in issues)


def test_field_budget_is_checked(small_config_dict):
    small_config_dict["field"]["series"]["amplitude"] = 0.9
    issues = validate_config(parse_config(small_config_dict))
    assert len(issues) == 1
    assert issues[0].startswith("field:")
    assert run_validate(parse_config(small_config_dict)).summary == {"valid": False, "issues": issues}


def test_with_seed(default_config):
    assert with_seed(default_config, None) is default_config
    seeded = with_seed(default_config, 99)
    assert seeded.ensemble.master_seed == 99
    assert seeded.ensemble.S == default_config.ensemble.S
    assert default_config.ensemble.master_seed == 20240601
    with pytest.raises(ConfigError):
        with_seed(default_config, -1)


def test_canonical_json_is_order_independent(small_config_dict):
    reordered = dict(reversed(list(small_config_dict.items())))
    first, second = parse_config(small_config_dict), parse_config(reordered)
    assert canonical_json(first) == canonical_json(second)
    assert json.loads(canonical_json(first))["ensemble"]["master_seed"] == 3
    assert canonical_json(with_seed(first, 4)) != canonical_json(first)


def test_field_spec_from_config(small_config_dict):
    spec = field_spec_from(parse_config(small_config_dict).field)
    assert isinstance(spec, UniformAffineField)
    assert spec.J_trunc == 3
    assert spec.psi[2].index == 3

    small_config_dict["field"] = {"family": "lognormal", "psi": [{"kind": "constant", "value": 0.1}]}
    spec = field_spec_from(parse_config(small_config_dict).field)
    assert isinstance(spec, LogNormalField)
    assert spec.psi[0].value == 0.1


def test_gain_norm_follows_the_variant(small_config_dict):
    cfg = parse_config(small_config_dict)
    assert gain_norm(cfg, reaction_from(cfg), convection_from(cfg)) == pytest.approx(4.0)
    small_config_dict["dynamics"]["gain_variant"] = "general"
    small_config_dict["dynamics"]["convection"] = {"kind": "constant", "vector": [0.5]}
    cfg = parse_config(small_config_dict)
    assert gain_norm(cfg, reaction_from(cfg), convection_from(cfg)) == pytest.approx(4.5)


def test_build_context_selects_the_gain(small_config_dict):
    ctx = build_context(parse_config(small_config_dict), workers=1)
    assert ctx.gain is not None
    assert ctx.gain.N_star in (1, 2, 3, 4)
    assert ctx.actuators.N == ctx.gain.N_star
    assert ctx.gain.lam == pytest.approx(ctx.gain.lambda_star)
    assert ctx.gain.beta_N > ctx.gain.beta_threshold
    assert [g.N for g in ctx.gaps] == [1, 2, 3, 4]
    assert 0 < ctx.c_emb < 1
    assert ctx.y0.shape == (2, 15)
    assert ctx.y0_norm_sq > 0
    assert ctx.seeds["master_seed"] == 3


def test_build_context_without_actuators(small_config_dict):
    small_config_dict["actuators"].update(N=0, auto_select=False)
    ctx = build_context(parse_config(small_config_dict), workers=1)
    assert ctx.gain is None
    assert ctx.gaps == []
    assert ctx.actuators.N == 0


def test_beta_pipeline(small_config_dict):
    output = run_beta(parse_config(small_config_dict))
    frame = output.frames["beta"]
    assert frame["N"].tolist() == [1, 2, 3, 4]
    assert frame["beta_N"].is_monotonic_increasing
    assert 0.5 < output.summary["exponent"] < 2.5
    assert output.summary["tail_min_N"] == 3
    assert output.summary["tail_exponent"] > output.summary["exponent"]


def test_failprob_pipeline(small_config_dict):
    output = run_failprob(parse_config(small_config_dict))
    frame = output.frames["failprob"]
    assert frame["N_bar"].tolist() == [1, 2]
    assert (frame["p_empirical"] <= 1.0).all()
    assert (frame["p_bound"] >= 0.0).all()
    assert output.summary["family"] == "uniform_affine"
    assert output.summary["kappa0"] is None
    assert output.summary["bounds_dominate"]


def test_unknown_subcommand(default_config):
    with pytest.raises(ConfigError, match="unknown subcommand"):
        run_subcommand("plot", default_config)


def test_json_ready():
    value = json_ready({"a": np.float64(1.5), "b": float("nan"), "c": [np.int64(2), np.bool_(True)], 3: math.inf})
    assert value == {"a": 1.5, "b": None, "c": [2, True], "3": None}
    assert type(value["c"][0]) is int
