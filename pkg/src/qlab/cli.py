"""Command line entry point: ``qlab run | list | diff``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .conformal import NonIntegrableError, UnresolvedScaleError
from .geometry import BallEscapesBoxError
from .pipeline import diff_reports, run_scenario
from .scenarios import ConfigError, list_scenarios, load
from .weights import BallOutsideBoxError

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_SCALE = 3
EXIT_BOX = 4

log = logging.getLogger("qlab")


def _run(args) -> int:
    try:
        sc = load(args.config)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    seed = None
    env = os.environ.get("QLAB_SEED")
    if env is not None:
        try:
            seed = int(env)
        except ValueError:
            log.error("QLAB_SEED must be an integer, got %r", env)
            return EXIT_CONFIG
    try:
        report = run_scenario(sc, seed=seed, threads=args.threads)
    except (UnresolvedScaleError, NonIntegrableError) as exc:
        log.error("unresolvable scale: %s", exc)
        return EXIT_SCALE
    except (BallOutsideBoxError, BallEscapesBoxError) as exc:
        log.error("out of box: %s", exc)
        return EXIT_BOX
    out = Path(args.out) if args.out else Path("qlab-out") / sc.name
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    for name, text in report.artifacts.items():
        (out / name).write_text(text)
    for c in report.data["checks"]:
        print(f"[{c['status']:>4}] {'hard' if c['hard'] else 'soft'}  {c['name']}")
    fails, flags = report.hard_failures, report.soft_flags
    print(f"{sc.name}: {len(fails)} hard failures, {len(flags)} soft flags; report in {out}")
    if fails or (args.strict and flags):
        return EXIT_FAIL
    return EXIT_OK


def _list(args) -> int:
    rows = list_scenarios()
    print(f"{'name':<10} {'n':>2} {'L':>5} {'m':>4}  description")
    for name, n, L, m, desc in rows:
        print(f"{name:<10} {n:>2} {L:>5g} {m:>4}  {desc}")
    return EXIT_OK


def _diff(args) -> int:
    try:
        a = json.loads(Path(args.a).read_text())
        b = json.loads(Path(args.b).read_text())
    except FileNotFoundError as exc:
        log.error("missing report: %s", exc.filename)
        return EXIT_CONFIG
    rows = diff_reports(a, b, args.rtol)
    for key, va, vb, why in rows:
        print(f"{key}: {va} -> {vb} ({why})")
    return EXIT_FAIL if rows else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qlab", description="Batch verification of weighted Poincaré inequalities.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a scenario (TOML file or built-in name)")
    r.add_argument("config")
    r.add_argument("--strict", action="store_true", help="treat soft flags as failures")
    r.add_argument("--out", help="output directory (default qlab-out/<name>)")
    r.add_argument("--threads", type=int, default=1)
    r.set_defaults(func=_run)
    ls = sub.add_parser("list", help="list built-in scenarios")
    ls.set_defaults(func=_list)
    d = sub.add_parser("diff", help="compare two reports")
    d.add_argument("a")
    d.add_argument("b")
    d.add_argument("--rtol", type=float, default=0.2)
    d.set_defaults(func=_diff)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
