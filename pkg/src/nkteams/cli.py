"""Command line front end: ``nkteams {validate,simulate,analyze,landscape-dump}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

from . import analysis
from .config import load_config
from .exceptions import (
    ConfigError,
    ManifestMismatchError,
    ParameterError,
    SchemaError,
)
from .simulation import resolve_parallelism, run_grid, setup_round

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("nkteams")


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="JSON config file (defaults reproduce the full design)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key; repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nkteams", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a config and report the grid size")
    _config_args(p)

    p = sub.add_parser("simulate", help="run the scenario grid and write the record CSV")
    _config_args(p)
    p.add_argument("--out", metavar="PATH", help="output CSV (default: output_path from the config)")
    p.add_argument("--parallelism", type=int, metavar="N")

    p = sub.add_parser("analyze", help="partial dependence per (K, pattern) panel")
    p.add_argument("input", help="simulation CSV")
    p.add_argument("--out", metavar="DIR", default="pdp", help="directory for the panel CSVs")
    p.add_argument("--scope", choices=["learn_prob", "tau"], default="learn_prob")
    p.add_argument("--per-panel", action=argparse.BooleanOptionalAction, default=True,
                   help="fit one tree per panel (default) or a single pooled tree")
    p.add_argument("--filter-t-max", type=int, metavar="N", help="keep periods t <= N only")
    p.add_argument("--svg", action="store_true", help="also write one SVG chart per panel")
    p.add_argument("--max-depth", type=int, default=8)
    p.add_argument("--min-leaf", type=int, default=50)
    p.add_argument("--empirical", action="store_true", help="write per-level target means instead of tree PDP")

    p = sub.add_parser("landscape-dump", help="write the landscape of one round as JSON")
    _config_args(p)
    p.add_argument("--round", type=int, default=0, dest="round_index")
    p.add_argument("--out", metavar="PATH", help="output file (default: stdout)")
    return parser


def _validate(args) -> int:
    cfg = load_config(args.config, args.overrides)
    print(f"ok: {len(cfg.scenarios)} scenarios x {cfg.settings['rounds']} rounds x "
          f"{cfg.settings['periods']} periods")
    return EXIT_OK


def _simulate(args) -> int:
    cfg = load_config(args.config, args.overrides)
    out = args.out or cfg.output_path
    parallelism = resolve_parallelism(args.parallelism or cfg.parallelism)
    start = time.monotonic()

    def progress(pos, total, scenario, status):
        print(f"[{pos + 1}/{total}] {status} k={scenario.k} pattern={scenario.pattern} tau={scenario.tau} "
              f"p={scenario.learn_prob:g} {scenario.coordination} ({time.monotonic() - start:.1f}s)",
              file=sys.stderr, flush=True)

    report = run_grid(cfg.scenarios, out, parallelism, progress)
    print(f"{report.ran} scenarios run, {report.skipped} already complete, {report.rows_written} rows "
          f"written to {out}", file=sys.stderr)
    if not report.ok:
        for sid, failed in report.failed.items():
            print(f"scenario {sid}: failed rounds {sorted(failed)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _analyze(args) -> int:
    df = analysis.load_dataset(args.input, args.filter_t_max)
    panels = analysis.panel_partial_dependence(df, args.scope, per_panel=args.per_panel,
                                               max_depth=args.max_depth, min_leaf=args.min_leaf,
                                               empirical=args.empirical)
    for path in analysis.write_panels(panels, args.out, args.scope, svg=args.svg):
        print(path)
    return EXIT_OK


def _landscape_dump(args) -> int:
    cfg = load_config(args.config, args.overrides)
    setup = setup_round(cfg.scenarios[0], args.round_index)
    text = setup.landscape.to_json(indent=1)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return EXIT_OK


COMMANDS = {
    "validate": _validate,
    "simulate": _simulate,
    "analyze": _analyze,
    "landscape-dump": _landscape_dump,
}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("NKTEAMS_LOGLEVEL", "WARNING"))
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ParameterError, SchemaError, ManifestMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
