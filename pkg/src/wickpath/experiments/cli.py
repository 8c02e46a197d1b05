"""Command-line entry point: ``wickpath <subcommand> --config FILE [options]``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ..foc import DomainError, MaxIterations, NoSignChange
from ..path_integral import KernelAnnihilated
from ..strategies import NotCubic, OdeDenominatorError, ZeroDenominator
from .config import ConfigError, parse_config
from .output import render_csv
from .runners import run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

# subcommand -> {config family: experiment id}
SUBCOMMANDS = {
    "simulate": {"walrasian": "walrasian_path"},
    "mc": {"walrasian": "walrasian_mc", "ex3": "ex3_mc"},
    "compare-ex3": {"ex3": "ex3_compare"},
    "pi-compare": {"pareto": "pareto_pi_compare"},
    "foc-scan": {"walrasian": "foc_scan"},
    "mgh-defect": {"mgh": "mgh_defect"},
}

NUMERIC_ERRORS = (FloatingPointError, ArithmeticError, KernelAnnihilated, DomainError,
                  NoSignChange, MaxIterations, NotCubic, ZeroDenominator, OdeDenominatorError)

# what `render` draws for each experiment: (csv, x column, panels, svg name, kind)
RENDER_PLANS = {
    "walrasian_path": [("trajectory.csv", "s_over_t", [("market share X(s)", ["X"]), ("control u(s)", ["u"])],
                        "trajectory.svg", "line")],
    "walrasian_mc": [("hist.csv", "bin_mid", [("terminal X histogram", ["count"])], "hist.svg", "bar")],
    "ex3_compare": [(f"{a}.csv", "s_over_t", [(f"{a}: X(s)", ["X"]), (f"{a}: u(s)", ["u"])], f"{a}.svg", "line")
                    for a in ("quantum", "pontryagin")],
    "ex3_mc": [(f"hist_{a}.csv", "bin_mid", [(f"{a}: terminal X histogram", ["count"])], f"hist_{a}.svg", "bar")
               for a in ("quantum", "pontryagin")],
    "foc_scan": [],
    "mgh_defect": [("defect.csv", "n", [("max interior defect", ["defect"])], "defect.svg", "line")],
}


def _pareto_plan(out: Path) -> list:
    header = (out / "pi.csv").read_text(encoding="utf-8").splitlines()[0].split(",")
    Xs = [h for h in header if h.startswith("X")]
    us = [h for h in header if h.startswith("u")]
    return [(f"{a}.csv", "s_over_t", [(f"{a}: X(s)", Xs), (f"{a}: u(s)", us)], f"{a}.svg", "line")
            for a in ("pi", "pontryagin")]


def render_dir(out: Path) -> list:
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    exp = manifest["experiment"]
    plan = _pareto_plan(out) if exp == "pareto_pi_compare" else RENDER_PLANS[exp]
    return [render_csv(out / csv, x, panels, out / svg, kind) for csv, x, panels, svg, kind in plan]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wickpath", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
        p.add_argument("--out", type=Path, default=None, help="output directory (default: runs/<experiment>)")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--no-svg", action="store_true")
    p = sub.add_parser("render", help="redraw SVGs from the CSVs in an output directory")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--config", type=Path, default=None, help="accepted for symmetry; unused")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "render":
            for f in render_dir(args.out):
                print(f)
            return EXIT_OK
        cfg = parse_config(args.config)
        family_map = SUBCOMMANDS[args.command]
        if cfg.family not in family_map:
            raise ConfigError(f"`{args.command}` cannot run a {cfg.family} configuration", source=cfg.source)
        cfg = cfg.with_experiment(family_map[cfg.family])
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("seed must be >= 0", source="--seed")
            cfg.seed = args.seed
        if args.threads < 1:
            raise ConfigError("threads must be >= 1", source="--threads")
        out = args.out or Path("runs") / cfg.experiment
        summary = run_experiment(cfg, out, threads=args.threads, svg=not args.no_svg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"{cfg.experiment}: wrote {len(summary.files) + 1} files to {out} ({summary.runtime_s:.2f} s)")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
