"""Command line entry point.

Exit codes: 0 success, 2 invalid input, 3 solver failure, 4 a
verification check failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import contextmanager
from typing import Any, Iterator, TextIO

import numpy as np

from .errors import PrfppError, ValidationError
from .experiments import CHECKS, rows_to_csv, run_solve, run_sweep, run_verify
from .scenario import ScenarioFile, bundled_scenarios, dump_scenario, load_scenario

EXIT_OK, EXIT_VALIDATION, EXIT_SOLVER, EXIT_VERIFY = 0, 2, 3, 4

__all__ = ["main", "load_scenario", "run_solve", "run_sweep", "run_verify"]


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


@contextmanager
def _output(path: str | None) -> Iterator[TextIO]:
    if path is None or path == "-":
        yield sys.stdout
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            yield fh


def _scenario(args: argparse.Namespace) -> ScenarioFile:
    sf = load_scenario(args.scenario)
    return sf.with_solver(seed=args.seed, samples=args.samples, tol=args.tol, max_iter=args.max_iter)


def _cmd_solve(args: argparse.Namespace) -> int:
    rec = run_solve(_scenario(args))
    with _output(args.out) as fh:
        fh.write(json.dumps(rec, indent=2, default=_jsonable) + "\n")
    return EXIT_OK


def _cmd_sweep(args: argparse.Namespace) -> int:
    rows = run_sweep(_scenario(args), args.threads, args.sweep or None)
    with _output(args.out) as fh:
        fh.write(rows_to_csv(rows))
    return EXIT_OK


def _cmd_verify(args: argparse.Namespace) -> int:
    sf = _scenario(args)
    checks = CHECKS if args.check == "all" else (args.check,)
    reports = [run_verify(sf, c, args.threads) for c in checks]
    with _output(args.out) as fh:
        fh.write(json.dumps(reports if len(reports) > 1 else reports[0], indent=2, default=_jsonable) + "\n")
    return EXIT_VERIFY if any(r["passed"] is False for r in reports) else EXIT_OK


def _cmd_report(args: argparse.Namespace) -> int:
    sf = _scenario(args)
    rec = run_solve(sf)
    lines = [f"scenario  {sf.name}  ({sf.mode}, hash {sf.hash})"]
    for key, value in rec.items():
        if key in ("scenario", "scenario_hash", "mode"):
            continue
        lines.append(f"  {key:<26} {json.dumps(value, default=_jsonable)}")
    failed = False
    for check in CHECKS:
        if check == "directions" and not sf.sweeps:
            continue
        rep = run_verify(sf, check, args.threads)
        if rep["passed"] is None:
            continue
        failed |= rep["passed"] is False
        status = "PASS" if rep["passed"] else "FAIL"
        extra = {k: v for k, v in rep.items()
                 if k not in ("check", "scenario", "scenario_hash", "passed", "table", "violations")}
        lines.append(f"{status}  {check:<12} {json.dumps(extra, default=_jsonable)}")
        for row in rep.get("table", []):
            lines.append(f"        N={row['n']:<8} pi_N={row['pi_n']:.10f}  gap={row['gap']:.3e}")
    with _output(args.out) as fh:
        fh.write("\n".join(lines) + "\n")
    return EXIT_VERIFY if failed else EXIT_OK


def _cmd_list(args: argparse.Namespace) -> int:
    for name in bundled_scenarios():
        print(name)
    return EXIT_OK


def _cmd_show(args: argparse.Namespace) -> int:
    with _output(args.out) as fh:
        fh.write(dump_scenario(_scenario(args)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", required=True, help="scenario file or bundled scenario name")
    common.add_argument("--out", help="output file (default: stdout)")
    common.add_argument("--seed", type=int, help="population sampling seed")
    common.add_argument("--samples", type=int, help="population size M")
    common.add_argument("--tol", type=float, help="solver tolerance")
    common.add_argument("--max-iter", type=int, dest="max_iter", help="fixed-point iteration cap")
    common.add_argument("--threads", type=int, default=1, help="sweep points solved concurrently")

    parser = argparse.ArgumentParser(
        prog="prfpp", description="Competitive portfolio equilibria in binomial markets with common noise.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="solve a scenario, JSON record").set_defaults(func=_cmd_solve)
    sw = sub.add_parser("sweep", parents=[common], help="run sweep blocks, CSV rows")
    sw.add_argument("--sweep", action="append", help="only this sweep (repeatable)")
    sw.set_defaults(func=_cmd_sweep)
    ve = sub.add_parser("verify", parents=[common], help="run verification checks, JSON report")
    ve.add_argument("--check", choices=(*CHECKS, "all"), default="all")
    ve.set_defaults(func=_cmd_verify)
    sub.add_parser("report", parents=[common], help="solve and verify, text summary").set_defaults(func=_cmd_report)
    sub.add_parser("show", parents=[common], help="print the normalized scenario").set_defaults(func=_cmd_show)
    sub.add_parser("list", help="list bundled scenarios").set_defaults(func=_cmd_list)
    return parser


class _OncePerMessage(logging.Filter):
    """Sweeps solve the same population many times; say each thing once."""

    def __init__(self) -> None:
        super().__init__()
        self.seen: set[str] = set()

    def filter(self, record: logging.LogRecord) -> bool:
        msg = record.getMessage()
        if msg in self.seen:
            return False
        self.seen.add(msg)
        return True


def _configure_logging() -> logging.Handler:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    handler.addFilter(_OncePerMessage())
    logger = logging.getLogger("prfpp")
    logger.addHandler(handler)
    return handler


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handler = _configure_logging()
    try:
        return _dispatch(args)
    finally:
        logging.getLogger("prfpp").removeHandler(handler)


def _dispatch(args: argparse.Namespace) -> int:
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except PrfppError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (OverflowError, ArithmeticError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    raise SystemExit(main())
