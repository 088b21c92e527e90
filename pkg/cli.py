#!/usr/bin/env python3
"""Experiment runner: parse a config, run one subcommand, write the artifacts.

Artifacts land in ``<out>/<subcommand>/``: one CSV per DataFrame of the
pipeline, ``summary.json`` with the scalar results and ``manifest.json`` with
the config hash, seeds, package versions, worker count and wall time.
``validate`` writes nothing.
"""
import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path
from typing import List

import numpy as np
import pandas as pd
import pydantic
import scipy
from dotenv import load_dotenv

from dynamics import resolve_workers
from errors import RhcError
from experiment_service import (
    SUBCOMMANDS,
    ExperimentOutput,
    canonical_json,
    load_config,
    run_subcommand,
    with_seed,
)
from models import ExperimentConfig

load_dotenv()

__version__ = "1.0.0"

RHC_OUTPUT_DIR = os.environ.get("RHC_OUTPUT_DIR", "runs")
RHC_LOG_LEVEL = os.environ.get("RHC_LOG_LEVEL", "INFO")
CSV_FLOAT_FORMAT = "%.17g"

logger = logging.getLogger("cli")


# --------- Artifacts ----------------------------------------------------------

def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()


def build_manifest(subcommand: str, cfg: ExperimentConfig, output: ExperimentOutput,
                   workers: int, wall_time: float) -> dict:
    return {
        "subcommand": subcommand,
        "config_name": cfg.name,
        "config_sha256": config_hash(cfg),
        "config": cfg.model_dump(mode="json"),
        "seeds": {"master_seed": cfg.ensemble.master_seed},
        "workers": workers,
        "wall_time_s": round(wall_time, 3),
        "files": sorted([f"{name}.csv" for name in output.frames] + ["summary.json"]),
        "versions": {
            "package": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pandas": pd.__version__,
            "pydantic": pydantic.VERSION,
        },
    }


def write_artifacts(out_dir: Path, output: ExperimentOutput, manifest: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, frame in output.frames.items():
        frame.to_csv(out_dir / f"{name}.csv", index=False, float_format=CSV_FLOAT_FORMAT)
    with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(output.summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out_dir


# --------- Entry point --------------------------------------------------------

def parse_args(argv: List[str]) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        description="Receding horizon control experiments for parabolic equations with random diffusion",
    )
    parser.add_argument("subcommand", choices=SUBCOMMANDS, help="Pipeline to run")
    parser.add_argument("--config", required=True, help="Path to the experiment config (JSON)")
    parser.add_argument("--out", default=RHC_OUTPUT_DIR, help=f"Output directory (default: {RHC_OUTPUT_DIR})")
    parser.add_argument("--seed", type=int, default=None, help="Master seed, overrides ensemble.master_seed")
    parser.add_argument("--workers", type=int, default=None,
                        help="Sample-parallel workers; 0 means one per CPU (default: RHC_WORKERS)")
    parser.add_argument("--quiet", action="store_true", help="Only log warnings and errors")
    return parser.parse_args(argv[1:])


def configure_logging(quiet: bool) -> None:
    level = logging.WARNING if quiet else getattr(logging, RHC_LOG_LEVEL.upper(), logging.INFO)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)
    logging.captureWarnings(True)


def main(argv: List[str]) -> int:
    args = parse_args(argv)
    configure_logging(args.quiet)
    started = time.perf_counter()
    try:
        cfg = with_seed(load_config(args.config), args.seed)
        output = run_subcommand(args.subcommand, cfg, args.workers)
    except RhcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code

    if args.subcommand == "validate":
        issues = output.summary["issues"]
        for issue in issues:
            print(issue, file=sys.stderr)
        if issues:
            return 2
        if not args.quiet:
            print(f"{args.config}: valid")
        return 0

    manifest = build_manifest(args.subcommand, cfg, output, resolve_workers(args.workers),
                              time.perf_counter() - started)
    out_dir = write_artifacts(Path(args.out) / args.subcommand, output, manifest)
    logger.info("wrote %s", out_dir)
    return 0


if __name__ == "__main__":
    raise SystemExit(main(sys.argv))
