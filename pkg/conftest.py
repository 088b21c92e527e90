import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from dynamics import build_setup  # noqa: E402
from experiment_service import load_config  # noqa: E402
from mesh_fem import ReactionForm, build_grid  # noqa: E402
from random_fields import SpatialFunction, UniformAffineField, build_ensemble, decaying_series  # noqa: E402
from spectral_actuators import build_actuators  # noqa: E402

CONFIG_DIR = Path(__file__).parent / "configs"


@pytest.fixture
def grid_1d():
    return build_grid(1, 1.0, 64)


@pytest.fixture
def uniform_spec():
    return UniformAffineField(nu0=SpatialFunction(value=1.0), psi=decaying_series(3, 0.2, 2.0), kappa=1.0)


@pytest.fixture
def make_setup(uniform_spec):
    """Small 1D setup: uniform-affine field, constant reaction, box actuators."""

    def factory(n_cells=9, S=2, N=1, reaction=-1.0, spec=None, seed=5, **kwargs):
        grid = build_grid(1, 1.0, n_cells)
        ensemble = build_ensemble(spec or uniform_spec, grid, S, seed)
        actuators = build_actuators(grid, N, 0.5)
        return build_setup(ensemble, actuators, ReactionForm(value=reaction), **kwargs)

    return factory


@pytest.fixture
def default_config():
    return load_config(CONFIG_DIR / "default_1d_uniform.json")


@pytest.fixture
def small_config_dict():
    """A coarse 1D uniform-affine experiment that runs every pipeline in seconds."""
    return {
        "name": "small_1d",
        "domain": {"d": 1, "L": 1.0, "n_cells": 16},
        "field": {"family": "uniform_affine", "series": {"count": 3, "amplitude": 0.2, "decay": 2.0}},
        "actuators": {"N": 2, "r": 0.5, "candidates": [1, 2, 3, 4], "auto_select": True},
        "dynamics": {
            "dt": 0.02,
            "t_end": 0.4,
            "reaction": {"kind": "constant", "value": -4.0},
            "initial_state": {"profile": 1.0, "noise": 0.3},
        },
        "ocp": {"T": 0.1, "beta_penalty": 0.01, "cg_tol": 1e-10},
        "rhc": {"delta": 0.1, "T": 0.2, "n_cycles": 10, "horizons": [0.1, 0.2]},
        "ensemble": {"S": 2, "master_seed": 3},
        "risk": {"N_bar": [1, 2], "S_indicator": 200, "S_moment": 200},
    }
