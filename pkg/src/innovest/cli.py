"""Command line: ``innovest run <config>`` and ``innovest convergence <model>``.

Exit status is 0 on success, 1 for configuration or usage errors and 2 for
runtime failures.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .experiment import ConfigError, load_config, run_convergence_check, run_experiment, write_convergence_csv

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="innovest", description="Innovation estimator experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run a Monte Carlo experiment from an INI config")
    run.add_argument("config", type=Path)
    run.add_argument("--replications", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--out", type=Path)
    run.add_argument("--workers", type=int)

    conv = sub.add_parser("convergence", help="estimate on one data set over a ladder of step sizes")
    conv.add_argument("model", choices=("ex1", "ex2"))
    conv.add_argument("--h-ladder", type=float, nargs="+", required=True, metavar="H")
    conv.add_argument("--seed", type=int, default=0)
    conv.add_argument("--delta", type=float, default=1.0)
    conv.add_argument("--T", type=float, default=10.0)
    conv.add_argument("--out", type=Path, help="write convergence.csv here")
    return p


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    overrides = {k: getattr(args, k) for k in ("replications", "seed", "out", "workers")
                 if getattr(args, k) is not None}
    for k in ("replications", "workers"):
        if k in overrides and overrides[k] < 1:
            raise ConfigError(f"--{k} must be at least 1")
    if overrides.get("seed", 0) < 0:
        raise ConfigError("--seed must be non-negative")
    cfg = replace(cfg, **overrides)
    res = run_experiment(cfg)
    n_bad = sum(r["status"] != "ok" for r in res.records)
    print(f"wrote {len(res.files)} files to {cfg.out} ({len(res.records)} estimates, {n_bad} failed)")
    return EXIT_OK


def _cmd_convergence(args) -> int:
    report = run_convergence_check(args.model, args.h_ladder, seed=args.seed, delta=args.delta, T=args.T)
    print(report.format())
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        write_convergence_csv(args.out / "convergence.csv", report)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return _cmd_run(args)
        return _cmd_convergence(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        if args.command == "convergence":
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
