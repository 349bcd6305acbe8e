"""Command-line entry point: ``fedidm run <config>`` and ``fedidm report <dir>``.

Exit codes: 0 success, 2 configuration or input error, 3 runtime invariant violation.
"""
from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .config import ConfigError, GridCell, load_config
from .core import DegenerateDirection
from .sim import InvariantViolation, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 2, 3

log = logging.getLogger("fedidm")


def _run_cell(cell: GridCell, out_root: Path) -> tuple[str, float]:
    summary = run_experiment(cell.sim, out_root / cell.name)
    return cell.name, summary.final_ter


def cmd_run(args) -> int:
    try:
        exp = load_config(args.config, args.set or [])
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_root = Path(args.output) if args.output else exp.output_dir
    out_root.mkdir(parents=True, exist_ok=True)
    cells = exp.cells()
    log.info("running %d cell(s) into %s", len(cells), out_root)
    try:
        if args.jobs > 1 and len(cells) > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                results = list(pool.map(_run_cell, cells, [out_root] * len(cells)))
        else:
            results = [_run_cell(c, out_root) for c in cells]
    except (InvariantViolation, DegenerateDirection, FloatingPointError) as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    for name, ter in results:
        print(f"{name}\tfinal_ter={ter:.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .plotting import plot_final_ter, plot_ter_curves
    from .report import build_table, read_summaries

    root = Path(args.results_dir)
    if not root.is_dir():
        print(f"error: {root} is not a directory", file=sys.stderr)
        return EXIT_CONFIG
    runs = read_summaries(root)
    if not runs:
        print(f"error: no */summary.json under {root}", file=sys.stderr)
        return EXIT_CONFIG
    table = build_table(runs)
    out = Path(args.output) if args.output else root
    out.mkdir(parents=True, exist_ok=True)
    for name, text in (("report.csv", table.to_csv()), ("report.txt", table.to_text())):
        tmp = out / (name + ".tmp")
        tmp.write_text(text)
        tmp.replace(out / name)
    if not args.no_figures:
        plot_ter_curves(table.curves, table.attacks, table.aggregators, out / "ter_curves.png",
                        table.stage_switch)
        plot_final_ter(table.cells, table.attacks, table.aggregators, out / "final_ter.png")
    sys.stdout.write(table.to_text())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedidm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment or a grid from a YAML config")
    r.add_argument("config")
    r.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config value by dotted path (repeatable)")
    r.add_argument("--jobs", type=int, default=1, help="grid cells run in parallel")
    r.add_argument("-o", "--output", help="output root (overrides output_dir)")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="tabulate and plot final TER across runs")
    rep.add_argument("results_dir")
    rep.add_argument("-o", "--output", help="where to write report files (default: results_dir)")
    rep.add_argument("--no-figures", action="store_true")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
