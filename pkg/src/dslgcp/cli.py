"""Command-line entry point: ``dslgcp <command> --config run.ini``.

Exit codes: 0 success, 2 configuration error, 3 data validation error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import __version__
from .config import ConfigError, load_config
from .detection import DetectionRangeError
from .inference import ConvergenceError, InferenceError
from .linalg import NotPositiveDefiniteError
from .mesh import MeshError, OutsideDomainError
from .model import DataError, SpecError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

COMMANDS = ("mesh", "simulate", "center", "fit", "predict", "diagnose")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dslgcp", description="Distance-sampling LGCP workflow")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "mesh": "build the triangulation and a quality report",
        "simulate": "simulate a survey from the [simulate] truth",
        "center": "write hierarchically centered covariates",
        "fit": "fit the model over the hyperparameter grid",
        "predict": "intensity surfaces, abundance and variance decomposition",
        "diagnose": "convergence, grid and data diagnostics",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", required=True, help="INI run configuration")
        p.add_argument("--seed", type=int, default=None, help="override [run] seed")
        p.add_argument("--workers", type=int, default=None, help="override [run] workers")
        p.add_argument("--output", default=None, help="override [paths] output directory")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s"
    )
    from . import workflow

    try:
        cfg = load_config(args.config, output=args.output, seed=args.seed, workers=args.workers)
        stage = getattr(workflow, f"run_{args.command}")
        with np.errstate(over="ignore"):
            result = stage(cfg)
    except (ConfigError, SpecError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, MeshError, OutsideDomainError, DetectionRangeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConvergenceError, InferenceError, NotPositiveDefiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if args.command == "diagnose":
        for k, v in result.items():
            print(f"{k} = {v}")
    else:
        print(f"{args.command}: outputs written to {cfg.output}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
