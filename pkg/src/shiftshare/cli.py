"""Command line front end for the analysis stages.

Every subcommand reads an optional ``key = value`` config file, applies
the shared flag overrides, runs one pipeline stage into the output
directory, and updates ``manifest.json`` there.  Exit codes: 0 on
success, 2 for input or configuration problems, 3 for estimation
failures (rank, convergence, degenerate clusters).
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .errors import EstimationError
from .hdfe import ConvergenceError
from .panels import PanelValidationError
from .pipeline import Pipeline, StageError

__all__ = ["main", "build_parser", "VALIDATION_EXIT", "ESTIMATION_EXIT"]

VALIDATION_EXIT = 2
ESTIMATION_EXIT = 3

_COMMANDS = (
    ("simulate", "generate a synthetic dataset directory with known parameters"),
    ("ingest", "validate a dataset directory and report its coverage"),
    ("choice-fit", "estimate the migration log-odds model"),
    ("build-iv", "predict choice probabilities and build instrument columns"),
    ("fit", "run the destination-level OLS and 2SLS with weak-IV diagnostics"),
    ("event-study", "fit the dynamic IV event study around inflow changes"),
    ("diagnose", "origin decomposition, balance, concentration, and ring checks"),
    ("placebo", "same-state outcome permutation test"),
    ("counterfactual", "equalized-tax flows and outcome decomposition"),
    ("spec-curve", "estimate every grid cell and emit the filtered curve"),
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shiftshare",
        description="model-based shift-share analysis of migration and local outcomes",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, blurb in _COMMANDS:
        p = sub.add_parser(name, help=blurb)
        p.add_argument("--config", help="path to a key = value config file")
        p.add_argument("--data", help="dataset directory (overrides data_dir)")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--seed", type=int, help="root random seed (overrides seed)")
        p.add_argument("--threads", type=int, help="worker threads (overrides threads)")
    return parser


def _configure(args: argparse.Namespace):
    grid = None
    if args.config:
        config, grid = load_config(args.config)
    else:
        config = RunConfig()
    overrides = {}
    if args.data:
        overrides["data_dir"] = args.data
    if args.out:
        overrides["out_dir"] = args.out
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    return (config.replace(**overrides) if overrides else config), grid


def _exit_code(err: BaseException) -> int | None:
    if isinstance(err, (EstimationError, ConvergenceError, np.linalg.LinAlgError)):
        return ESTIMATION_EXIT
    if isinstance(err, (PanelValidationError, ConfigError, FileNotFoundError, OSError, KeyError, ValueError)):
        return VALIDATION_EXIT
    return None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config, grid = _configure(args)
        manifest = Pipeline(config).run(args.command, grid=grid)
    except StageError as err:
        code = _exit_code(err.cause)
        if code is None:
            raise
        print(f"shiftshare {args.command}: {err}", file=sys.stderr)
        return code
    except (ConfigError, PanelValidationError, FileNotFoundError, ValueError) as err:
        print(f"shiftshare {args.command}: {err}", file=sys.stderr)
        return VALIDATION_EXIT
    print(manifest)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
