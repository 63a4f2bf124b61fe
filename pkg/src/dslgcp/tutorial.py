"""Run the bundled synthetic tutorial and compare it with the committed golden files.

``python -m dslgcp.tutorial`` runs the pipeline into a temporary directory
and compares; ``--regenerate`` overwrites the golden files instead. Only
the maintenance command regenerates; tests never do.
"""

from __future__ import annotations

import argparse
import math
import re
import shutil
import sys
import tempfile
from pathlib import Path

from .config import load_config
from . import workflow

__all__ = ["TUTORIAL_DIR", "GOLDEN_FILES", "STAGES", "run_pipeline", "compare_outputs", "regenerate"]

TUTORIAL_DIR = Path(__file__).resolve().parents[2] / "tutorial"
STAGES = ("mesh", "simulate", "center", "fit", "predict", "diagnose")
GOLDEN_FILES = (
    "mesh.txt",
    "mesh_quality.txt",
    "transects.csv",
    "detections.csv",
    "covariates.csv",
    "truth.txt",
    "yearly_sst.csv",
    "theta_grid.csv",
    "summary_table.csv",
    "detection_curve.csv",
    "abundance.csv",
    "decomposition.csv",
    "diagnostics.txt",
)
FLOAT_TOL = 1e-6

_TOKEN = re.compile(r"[,=\s]+")


def run_pipeline(config_path, output, seed=None) -> dict:
    cfg = load_config(config_path, output=output, seed=seed)
    results = {}
    for stage in STAGES:
        results[stage] = getattr(workflow, f"run_{stage}")(cfg)
    return results


def _is_int(tok: str) -> bool:
    return re.fullmatch(r"[+-]?\d+", tok) is not None


def _as_float(tok: str):
    try:
        return float(tok)
    except ValueError:
        return None


def compare_files(golden: Path, produced: Path, tol: float = FLOAT_TOL) -> list[str]:
    """Token-wise comparison: integers and text exactly, floats within ``tol * max(1, |golden|)``."""
    problems = []
    a = golden.read_text().splitlines()
    b = produced.read_text().splitlines()
    if len(a) != len(b):
        return [f"{golden.name}: {len(b)} lines, expected {len(a)}"]
    for ln, (la, lb) in enumerate(zip(a, b), 1):
        ta, tb = _TOKEN.split(la.strip()), _TOKEN.split(lb.strip())
        if len(ta) != len(tb):
            problems.append(f"{golden.name}:{ln}: token count differs")
            continue
        for x, y in zip(ta, tb):
            if x == y:
                continue
            fx, fy = _as_float(x), _as_float(y)
            if _is_int(x) or _is_int(y) or fx is None or fy is None:
                problems.append(f"{golden.name}:{ln}: {y!r} != {x!r}")
            elif not (math.isclose(fx, fy, rel_tol=0, abs_tol=tol * max(1.0, abs(fx)))):
                problems.append(f"{golden.name}:{ln}: {fy!r} differs from {fx!r}")
    return problems


def compare_outputs(golden_dir, output_dir, tol: float = FLOAT_TOL) -> list[str]:
    golden_dir, output_dir = Path(golden_dir), Path(output_dir)
    problems = []
    for name in GOLDEN_FILES:
        g, o = golden_dir / name, output_dir / name
        if not g.is_file():
            problems.append(f"missing golden file {name}")
        elif not o.is_file():
            problems.append(f"pipeline did not produce {name}")
        else:
            problems += compare_files(g, o, tol)
    return problems


def regenerate(tutorial_dir=TUTORIAL_DIR) -> None:
    tutorial_dir = Path(tutorial_dir)
    golden = tutorial_dir / "golden"
    with tempfile.TemporaryDirectory() as tmp:
        run_pipeline(tutorial_dir / "config.ini", tmp)
        golden.mkdir(exist_ok=True)
        for name in GOLDEN_FILES:
            shutil.copyfile(Path(tmp) / name, golden / name)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python -m dslgcp.tutorial", description=__doc__.splitlines()[0])
    ap.add_argument("--tutorial-dir", default=str(TUTORIAL_DIR))
    ap.add_argument("--regenerate", action="store_true", help="overwrite the golden files")
    args = ap.parse_args(argv)
    tdir = Path(args.tutorial_dir)
    if args.regenerate:
        regenerate(tdir)
        print(f"golden files written to {tdir / 'golden'}")
        return 0
    with tempfile.TemporaryDirectory() as tmp:
        run_pipeline(tdir / "config.ini", tmp)
        problems = compare_outputs(tdir / "golden", tmp)
    for p in problems:
        print(p)
    print("tutorial outputs match the golden files" if not problems else f"{len(problems)} mismatches")
    return 0 if not problems else 1


if __name__ == "__main__":
    sys.exit(main())
