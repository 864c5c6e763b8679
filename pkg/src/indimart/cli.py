"""Command line: ``indimart generate | decompose | verify``.

Exit codes: 0 success, 1 a verification check failed, 2 invalid input or
parameters, 3 the input is not a martingale.  ``INDIMART_SEED`` overrides
``--seed``.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from .decompose import DEFAULT_N_MAX, DEFAULT_TOL_REL, decompose_martingale, generate_random_martingale
from .errors import MeasurabilityError, PreconditionError, SchemaError
from .serialize import (
    norm_table_csv,
    read_decomposition,
    read_martingale,
    report_to_json,
    stage_decay_csv,
    write_decomposition,
    write_martingale,
)
from .verify import run_full_report

EXIT_OK, EXIT_CHECK, EXIT_INPUT, EXIT_PRECONDITION = 0, 1, 2, 3

MARTINGALE_FILE = "martingale.json"
DECOMPOSITION_FILE = "decomposition.json"
NORM_FILE = "norm_table.csv"
DECAY_FILE = "stage_decay.csv"
REPORT_JSON = "report.json"
REPORT_TABLE = "report.txt"


@dataclass
class RunConfig:
    input: Path | None = None
    seed: int = 0
    K: int = 2
    m: int = 1
    branching: tuple[int, ...] = (2,)
    distribution: str = "normal"
    tol_rel: float = DEFAULT_TOL_REL
    n_max: int = DEFAULT_N_MAX
    max_points: int | None = None
    out_dir: Path = Path(".")
    format: str = "table"

    def __post_init__(self):
        if not 0 < self.tol_rel < 1:
            raise SchemaError(f"tol-rel must lie in (0, 1), got {self.tol_rel}")
        if self.n_max < 1:
            raise SchemaError(f"n-max must be at least 1, got {self.n_max}")
        if self.max_points is not None and self.max_points < 1:
            raise SchemaError(f"max-points must be at least 1, got {self.max_points}")
        if self.format not in ("json", "table"):
            raise SchemaError(f"unknown format {self.format!r}")

    def profile(self):
        return self.branching[0] if len(self.branching) == 1 else self.branching


def _branching(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(b) for b in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer or comma-separated integers, got {text!r}") from None


def _generated(config: RunConfig):
    try:
        return generate_random_martingale(config.seed, config.K, config.m, config.profile(), config.distribution)
    except ValueError as exc:
        raise SchemaError(f"invalid generator parameters: {exc}") from exc


def cmd_generate(config: RunConfig) -> int:
    space, F, Xs = _generated(config)
    config.out_dir.mkdir(parents=True, exist_ok=True)
    path = config.out_dir / MARTINGALE_FILE
    write_martingale(path, space, F, Xs)
    print(f"wrote {path} ({space.size} points, K={F.K}, m={config.m})")
    return EXIT_OK


def cmd_decompose(config: RunConfig) -> int:
    space, F, Xs = read_martingale(config.input) if config.input else _generated(config)
    d = decompose_martingale(Xs, F, space, config.tol_rel, config.n_max, config.max_points)
    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    write_decomposition(out / DECOMPOSITION_FILE, d)
    (out / NORM_FILE).write_text(norm_table_csv(d))
    (out / DECAY_FILE).write_text(stage_decay_csv(d))
    stages = ", ".join(f"k={s.k}: {s.n_stages}{'' if s.converged else ' (not converged)'}" for s in d.steps)
    print(f"wrote {out / DECOMPOSITION_FILE}: {d.space.size} points, stages {stages}")
    return EXIT_OK


def cmd_verify(config: RunConfig) -> int:
    if config.input is None:
        raise SchemaError("verify needs --input")
    report = run_full_report(read_decomposition(config.input))
    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / REPORT_JSON).write_text(report_to_json(report))
    (out / REPORT_TABLE).write_text(report.table() + "\n")
    print(report_to_json(report) if config.format == "json" else report.table(), end="" if config.format == "json" else "\n")
    for check in report.failed():
        print(f"failed check: {check.name}", file=sys.stderr)
    return EXIT_OK if report.passed else EXIT_CHECK


COMMANDS = {"generate": cmd_generate, "decompose": cmd_decompose, "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="indimart", description="Decompose a finite martingale into martingales with independent increments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("generate", "write a random filtered martingale"),
        ("decompose", "decompose a martingale file or a generated martingale"),
        ("verify", "check a decomposition file"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--input", type=Path, help="input JSON file")
        p.add_argument("--seed", type=int, default=0, help="generator seed (INDIMART_SEED overrides)")
        p.add_argument("--K", type=int, default=2, help="number of time steps")
        p.add_argument("--m", type=int, default=1, help="dimension of the values")
        p.add_argument("--branching", type=_branching, default=(2,), help="fan-out, one value or one per step (e.g. 2,3,2)")
        p.add_argument("--distribution", default="normal", choices=["normal", "uniform", "integer"])
        p.add_argument("--tol-rel", type=float, default=DEFAULT_TOL_REL, help="stop once |residual| <= tol-rel * |increment|")
        p.add_argument("--n-max", type=int, default=DEFAULT_N_MAX, help="maximal number of stages per step")
        p.add_argument(
            "--max-points", type=int, default=None, help="stop a step once the refined space exceeds this size (default 20000, or 500 for m > 1)"
        )
        p.add_argument("--out-dir", type=Path, default=Path("."), help="directory for output files")
        p.add_argument("--format", default="table", choices=["json", "table"], help="report format on stdout")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    seed = args.seed
    env = os.environ.get("INDIMART_SEED")
    try:
        if env is not None:
            try:
                seed = int(env)
            except ValueError:
                raise SchemaError(f"INDIMART_SEED is not an integer: {env!r}") from None
        config = RunConfig(
            input=args.input,
            seed=seed,
            K=args.K,
            m=args.m,
            branching=args.branching,
            distribution=args.distribution,
            tol_rel=args.tol_rel,
            n_max=args.n_max,
            max_points=args.max_points,
            out_dir=args.out_dir,
            format=args.format,
        )
        return COMMANDS[args.command](config)
    except SchemaError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (PreconditionError, MeasurabilityError) as exc:
        print(f"precondition failed: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION


if __name__ == "__main__":
    sys.exit(main())
