"""Command line entry point: ``mfdelay run | validate | list-experiments``."""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import EXPERIMENTS, ExperimentConfig, validate_config
from .errors import (ConfigurationError, DivergenceError, NonConvergenceError,
                     PreconditionError, StepSizeError)
from .experiments import ExperimentResult, Table, run_experiment

EXIT_OK, EXIT_FAILED_CHECKS, EXIT_CONFIG, EXIT_NONCONVERGENCE, EXIT_DIVERGENCE = 0, 1, 2, 3, 4


def _plain(obj):
    """JSON-ready copy: numpy scalars unwrapped, non-finite floats as null."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def _dump_json(path: Path, payload: dict) -> None:
    text = json.dumps(_plain(payload), sort_keys=True, indent=2, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8", newline="\n")


INTEGER_COLUMNS = frozenset({"iteration", "probe", "system", "functional"})


def _cell(x: float, integer: bool) -> str:
    if not math.isfinite(x):
        return ""
    return str(int(x)) if integer else repr(float(x))


def write_csv(path: Path, table: Table) -> None:
    ints = [c in INTEGER_COLUMNS for c in table.columns]
    lines = [",".join(table.columns)]
    lines += [",".join(_cell(x, i) for x, i in zip(row, ints)) for row in table.rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def manifest(cfg: ExperimentConfig) -> dict:
    return {"config": cfg.to_dict(), "version": __version__}


def write_outputs(out: Path, cfg: ExperimentConfig, result: ExperimentResult) -> None:
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(out / "result.json", {
        "experiment": cfg.experiment, "seed": cfg.seed, "passed": result.passed,
        "checks": result.checks, "values": result.values,
    })
    for name, table in result.tables.items():
        write_csv(out / f"{name}.csv", table)
    _dump_json(out / "manifest.json", manifest(cfg))


def _load(path: str) -> tuple[ExperimentConfig | None, list[str]]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        return None, [f"cannot read {path}: {exc}"]
    return validate_config(text)


def _report(errors: list[str]) -> None:
    for e in errors:
        print(f"error: {e}", file=sys.stderr)


def cmd_run(args) -> int:
    cfg, errors = _load(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = args.out
    if cfg is not None and overrides:
        cfg, errors = validate_config({**cfg.to_dict(), **overrides})
    if errors:
        _report(errors)
        return EXIT_CONFIG
    out = Path(cfg.output_dir)
    try:
        result = run_experiment(cfg)
    except (ConfigurationError, PreconditionError) as exc:
        _report([str(exc)])
        return EXIT_CONFIG
    except (NonConvergenceError, StepSizeError) as exc:
        out.mkdir(parents=True, exist_ok=True)
        _dump_json(out / "diagnostics.json", {
            "error": type(exc).__name__, "message": str(exc),
            "norm_history": getattr(exc, "history", []),
        })
        _dump_json(out / "manifest.json", manifest(cfg))
        _report([f"solver did not converge: {exc} (see {out / 'diagnostics.json'})"])
        return EXIT_NONCONVERGENCE
    except DivergenceError as exc:
        _report([f"numerical divergence: {exc}"])
        return EXIT_DIVERGENCE
    write_outputs(out, cfg, result)
    for name, ok in result.checks.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    print(f"results written to {out}")
    return EXIT_OK if result.passed else EXIT_FAILED_CHECKS


def cmd_validate(args) -> int:
    cfg, errors = _load(args.config)
    if errors:
        _report(errors)
        return EXIT_CONFIG
    print(cfg.dump(), end="")
    return EXIT_OK


def cmd_list(args) -> int:
    for name in EXPERIMENTS:
        print(name)
    return EXIT_OK


def _seed(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfdelay", description="Mean-field delay control experiments")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment from a config file")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=_seed)
    r.add_argument("--out")
    r.set_defaults(fn=cmd_run)
    v = sub.add_parser("validate", help="check a config file and print it with defaults filled")
    v.add_argument("--config", required=True)
    v.set_defaults(fn=cmd_validate)
    ls = sub.add_parser("list-experiments", help="print the experiment names")
    ls.set_defaults(fn=cmd_list)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
