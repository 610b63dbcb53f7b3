"""Command-line entry point: ``drcons run|acceptance|diag``."""

import argparse
import dataclasses
import json
import logging
import os
import platform
import sys

import numpy as np

from . import __version__, harness
from .errors import InvalidInputError


def _env(seed):
    return {"python": platform.python_version(), "numpy": np.__version__, "drcons": __version__, "seed": seed}


def _emit(rows, cfg, args):
    if args.out:
        harness.write_outputs(rows, cfg, args.out, args.format, env=_env(args.seed))
        print(f"wrote {len(rows)} rows to {args.out}", file=sys.stderr)
    elif args.format == "csv":
        sys.stdout.write(harness.write_csv(rows))
    else:
        sys.stdout.write(harness.rows_to_json(rows, cfg) + "\n")


def cmd_run(args):
    cfg = harness.load_scenario(args.scenario)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seeds=[args.seed])
    rows = harness.run_scenario(cfg, jobs=args.jobs)
    _emit(rows, cfg, args)
    failed = [r for r in rows if not r.ok]
    for r in failed:
        print(f"cell failed: seed={r.seed} T={r.T}: {r.reason}", file=sys.stderr)
    return 0 if not failed else 1


DIAG_TESTS = {
    "kappa": (lambda v: v >= -1e-9, "min kappa margin", min),
    "covariance": (lambda v: v >= -1e-8, "min covariance gap", min),
    "gradcheck": (lambda v: v < 1e-5, "max gradient relative error", max),
    "projection": (lambda v: v <= 1e-5, "max projection objective gap", max),
}


def cmd_diag(args):
    cfg = harness.builtin_scenario(f"diag_{args.check}")
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seeds=[args.seed])
    rows = harness.run_scenario(cfg, jobs=args.jobs)
    test, label, agg = DIAG_TESTS[args.check]
    vals = [r.value for r in rows if r.ok]
    ok = len(vals) == len(rows) and all(test(v) for v in vals)
    if args.out:
        harness.write_outputs(rows, cfg, args.out, args.format, env=_env(args.seed))
    print(f"{args.check}: {len(vals)} instances, {label} {agg(vals) if vals else float('nan'):.3e} -> "
          f"{'ok' if ok else 'FAILED'}")
    return 0 if ok else 1


def cmd_acceptance(args):
    from .acceptance import Suite

    results = Suite(jobs=args.jobs).run_all(report=lambda line: print(line, flush=True))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump([{"key": r.key, "title": r.title, "passed": r.passed, "summary": r.summary,
                        "runtime": r.runtime, "details": r.details} for r in results], fh, indent=2, default=float)
    n_pass = sum(r.passed for r in results)
    print(f"{n_pass}/{len(results)} criteria passed")
    return 0 if n_pass == len(results) else 1


def build_parser():
    p = argparse.ArgumentParser(prog="drcons", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None, help="run only this seed")
        sp.add_argument("--out", default=None, help="output file (a sidecar <out>.config.json is written too)")
        sp.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker processes")
        sp.add_argument("--format", choices=("csv", "json"), default="csv")

    sp = sub.add_parser("run", help="run a scenario file")
    sp.add_argument("scenario")
    common(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("acceptance", help="run the acceptance suite")
    common(sp)
    sp.set_defaults(func=cmd_acceptance)

    sp = sub.add_parser("diag", help="randomized numerical diagnostics")
    sp.add_argument("check", choices=sorted(DIAG_TESTS))
    common(sp)
    sp.set_defaults(func=cmd_diag)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InvalidInputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
