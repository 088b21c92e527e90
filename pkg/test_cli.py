import json

import pandas as pd
import pytest

from cli import config_hash, main, parse_args
from conftest import CONFIG_DIR
from experiment_service import load_config, with_seed


@pytest.fixture
def write_config(tmp_path, small_config_dict):
    def factory(cfg=None, name="small.json"):
        path = tmp_path / name
        path.write_text(json.dumps(cfg or small_config_dict), encoding="utf-8")
        return str(path)

    return factory


def _run(*args):
    return main(["cli.py", *args])


def test_parse_args_defaults():
    args = parse_args(["cli.py", "simulate", "--config", "x.json"])
    assert args.subcommand == "simulate"
    assert args.seed is None
    assert args.workers is None
    with pytest.raises(SystemExit):
        parse_args(["cli.py", "plot", "--config", "x.json"])


def test_validate_shipped_config(capsys):
    assert _run("validate", "--config", str(CONFIG_DIR / "default_1d_uniform.json")) == 0
    assert "valid" in capsys.readouterr().out


def test_validate_reports_issues(write_config, small_config_dict, capsys, tmp_path):
    small_config_dict["dynamics"]["t_end"] = 0.41
    assert _run("validate", "--config", write_config(small_config_dict), "--out", str(tmp_path / "out")) == 2
    assert "dynamics.t_end" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_missing_or_malformed_config(tmp_path, capsys):
    assert _run("simulate", "--config", str(tmp_path / "absent.json")) == 2
    broken = tmp_path / "broken.json"
    broken.write_text("{not json", encoding="utf-8")
    assert _run("simulate", "--config", str(broken)) == 2
    assert capsys.readouterr().err.count("error: [cli]") == 2


def test_config_that_is_not_utf8(tmp_path, capsys):
    binary = tmp_path / "binary.json"
    binary.write_bytes(b'{"name": "\xff\xfe"}')
    assert _run("validate", "--config", str(binary)) == 2
    assert "cannot read config file" in capsys.readouterr().err


def test_insufficient_actuators_exit_code(write_config, small_config_dict, tmp_path, capsys):
    small_config_dict["actuators"].update(N=1, auto_select=False)
    small_config_dict["dynamics"]["reaction"]["value"] = -40.0
    assert _run("simulate", "--config", write_config(small_config_dict), "--out", str(tmp_path)) == 4
    assert "[dynamics]" in capsys.readouterr().err


def test_simulate_writes_artifacts(write_config, tmp_path):
    path = write_config()
    out = tmp_path / "runs"
    assert _run("simulate", "--config", path, "--out", str(out), "--seed", "42", "--quiet") == 0
    run_dir = out / "simulate"
    assert sorted(p.name for p in run_dir.iterdir()) == ["manifest.json", "summary.json", "trajectory.csv"]

    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["seeds"]["master_seed"] == 42
    assert manifest["config_sha256"] == config_hash(with_seed(load_config(path), 42))
    assert manifest["files"] == ["summary.json", "trajectory.csv"]
    assert manifest["workers"] >= 1

    frame = pd.read_csv(run_dir / "trajectory.csv")
    assert list(frame.columns) == ["t", "E_H2", "E_V2", "H2_q05", "H2_q50", "H2_q95"]
    assert len(frame) == 21
    summary = json.loads((run_dir / "summary.json").read_text())
    assert summary["energy_violations"] == 0
    assert summary["final_E_H2"] < summary["initial_E_H2"]


def test_failprob_writes_artifacts(write_config, tmp_path):
    assert _run("failprob", "--config", write_config(), "--out", str(tmp_path), "--quiet") == 0
    frame = pd.read_csv(tmp_path / "failprob" / "failprob.csv")
    assert frame["N_bar"].tolist() == [1, 2]


@pytest.mark.slow
def test_rhc_reruns_are_byte_identical(write_config, tmp_path):
    path = write_config()
    outputs = []
    for run in ("first", "second"):
        out = tmp_path / run
        assert _run("rhc", "--config", path, "--out", str(out), "--workers", "1", "--quiet") == 0
        outputs.append(out / "rhc")
    for name in ("cycles.csv", "trace.csv", "horizons.csv", "summary.json"):
        assert (outputs[0] / name).read_bytes() == (outputs[1] / name).read_bytes()

    summary = json.loads((outputs[0] / "summary.json").read_text())
    assert summary["completed"]
    assert summary["zeta_hat"] > 0
    assert summary["alpha_hat"] > 0
    cycles = pd.read_csv(outputs[0] / "cycles.csv")
    assert cycles["k"].tolist() == list(range(10))


@pytest.mark.slow
def test_ocp_writes_controls(write_config, tmp_path):
    assert _run("ocp", "--config", write_config(), "--out", str(tmp_path), "--quiet") == 0
    run_dir = tmp_path / "ocp"
    controls = pd.read_csv(run_dir / "controls.csv")
    assert list(controls.columns) == ["sample", "step", "t", "actuator", "u"]
    summary = json.loads((run_dir / "summary.json").read_text())
    assert summary["converged"]
    assert summary["V_T"] <= summary["J_zero"]
