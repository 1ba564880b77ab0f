"""Command-line front end.

    voltvar run-simulation --feeder F.json --profile P.csv --mode coordinated --out prefix
    voltvar run-case1 [--feeder F.json] [--out prefix]
    voltvar run-case2 [--feeder F.json] [--out prefix]
    voltvar compare   [--feeder F.json] [--baseline-feeder G.json] [--out prefix]

--config points at a JSON file overriding ScheduleConfig fields, e.g.
{"persistence_min": 10, "similarity_tol": 0.4}.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import harness
from .feeder import load_feeder, load_profile


def _schedule(args, mode: str | None = None) -> harness.ScheduleConfig:
    cfg = harness.ScheduleConfig()
    if getattr(args, "config", None):
        with open(args.config) as fh:
            overrides = json.load(fh)
        for key, val in overrides.items():
            if not hasattr(cfg, key):
                raise SystemExit(f"unknown config field {key!r}")
            setattr(cfg, key, val)
    if mode:
        cfg.mode = mode
    return cfg


def _profile(args):
    if getattr(args, "profile", None):
        return load_profile(args.profile)
    return load_profile(harness.default_profile_path())


def cmd_run_simulation(args) -> int:
    feeder = load_feeder(args.feeder or harness.default_feeder_path("mod"))
    cfg = _schedule(args, args.mode)
    report = harness.run(feeder, _profile(args), cfg, progress=not args.quiet)
    print(json.dumps(report.summary(), indent=1))
    if args.out:
        report.to_csv(f"{args.out}.csv")
        report.to_json(f"{args.out}.json")
        print(f"wrote {args.out}.csv and {args.out}.json", file=sys.stderr)
    return 0


def cmd_run_case1(args) -> int:
    _, summary = harness.run_case1(args.feeder, getattr(args, "_rows", None), args.out)
    print(json.dumps(summary, indent=1))
    return 0


def cmd_run_case2(args) -> int:
    _, summary = harness.run_case2(args.feeder, getattr(args, "_rows", None), args.out)
    print(json.dumps(summary, indent=1))
    return 0


def cmd_compare(args) -> int:
    rows = load_profile(args.profile) if args.profile else None
    out = harness.compare(args.feeder, args.baseline_feeder, rows, args.out)
    print(json.dumps(out, indent=1))
    coord, conv = out["coordinated"], out["conventional"]
    print(f"\ntap operations: coordinated {coord['tap_ops_total']} vs "
          f"conventional {conv['tap_ops_total']}", file=sys.stderr)
    print(f"energy loss kWh: coordinated {coord['energy_loss_kwh']} vs "
          f"conventional {conv['energy_loss_kwh']}", file=sys.stderr)
    return 0


def main(argv=None) -> int:
    top = argparse.ArgumentParser(prog="voltvar", description=__doc__,
                                  formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = top.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run-simulation", help="time-series run of one control mode")
    p.add_argument("--feeder", help="feeder JSON (default: bundled study feeder)")
    p.add_argument("--profile", help="load/PV profile CSV (default: bundled day)")
    p.add_argument("--mode", default="coordinated",
                   choices=["coordinated", "conventional", "exhaustive"])
    p.add_argument("--out", help="output prefix for CSV/JSON step logs")
    p.add_argument("--config", help="JSON file with ScheduleConfig overrides")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_run_simulation)

    for name, fn, doc in (("run-case1", cmd_run_case1, "clear-sky loss-minimization study"),
                          ("run-case2", cmd_run_case2, "cloud-transient voltage-support study")):
        p = sub.add_parser(name, help=doc)
        p.add_argument("--feeder")
        p.add_argument("--out")
        p.add_argument("--config")
        p.set_defaults(fn=fn)

    p = sub.add_parser("compare", help="coordinated vs conventional vs exhaustive")
    p.add_argument("--feeder", help="feeder for coordinated/exhaustive modes")
    p.add_argument("--baseline-feeder", help="feeder for the conventional baseline")
    p.add_argument("--profile")
    p.add_argument("--out")
    p.add_argument("--config")
    p.set_defaults(fn=cmd_compare)

    args = top.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
