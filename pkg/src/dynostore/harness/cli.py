"""``dynostore-harness``: run the desk-scale experiments from the shell.

    dynostore-harness retention --seed 7
    dynostore-harness fairness --scenario my-scenario.json --out report.txt
    dynostore-harness overhead --json
    dynostore-harness consensus --schedules 2000

The first three subcommands take a scenario: either a JSON file via
``--scenario`` or one of the built-in presets by the same name as the
subcommand. ``consensus`` runs the deterministic replica simulator instead
(exhaustive exploration plus seeded random fault schedules) and takes no
scenario file.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .experiments import run_fairness, run_overhead, run_retention
from .report import write_report
from .scenario import BUILTIN, Scenario, ScenarioInvalidError, builtin
from .simnet import explore, random_schedules

_EXPERIMENTS = {
    "retention": run_retention,
    "fairness": run_fairness,
    "overhead": run_overhead,
}


def _load_scenario(args: argparse.Namespace, default_name: str) -> Scenario:
    if args.scenario:
        return Scenario.load(args.scenario)
    return builtin(default_name)


def _run_consensus(args: argparse.Namespace) -> dict:
    explorations = [
        ("reliable-depth8", dict(max_events=8, allow_drops=False, max_dups=0)),
        ("lossy-depth7", dict(max_events=7, allow_drops=True, max_dups=1)),
    ]
    exhaustive = []
    violations: list[str] = []
    for name, mode in explorations:
        rep = explore(max_states=args.max_states, **mode)
        entry = {"name": name, **mode, **rep.to_dict()}
        exhaustive.append(entry)
        violations.extend(entry["violations"])
    rnd = random_schedules(schedules=args.schedules, seed=args.seed)
    violations.extend(sorted(set(rnd.violations)))
    return {
        "experiment": "consensus",
        "seed": args.seed,
        "exhaustive": exhaustive,
        "random": rnd.to_dict(),
        "violations": sorted(set(violations)),
    }


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="dynostore-harness",
        description="Fault-injection experiments against an in-process cluster.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name in _EXPERIMENTS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument(
            "--scenario",
            help=f"scenario JSON file (default: built-in '{name}' preset)",
        )
        p.add_argument("--seed", type=int, default=None,
                       help="override the scenario seed")
        p.add_argument("--out", type=Path, default=None,
                       help="write the report here instead of stdout only")
        p.add_argument("--json", action="store_true",
                       help="emit JSON instead of text")

    p = sub.add_parser("consensus", help="replica-protocol invariant checking")
    p.add_argument("--schedules", type=int, default=1000,
                   help="random fault schedules to run (default 1000)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-states", type=int, default=200_000,
                   help="state cap for exhaustive exploration")
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("scenarios", help="list built-in scenario presets")

    args = parser.parse_args(argv)

    if args.command == "scenarios":
        for name in sorted(BUILTIN):
            print(name)
        return 0

    try:
        if args.command == "consensus":
            report = _run_consensus(args)
        else:
            scenario = _load_scenario(args, args.command)
            report = _EXPERIMENTS[args.command](scenario, seed=args.seed)
    except ScenarioInvalidError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    rendered = write_report(report, args.out, fmt="json" if args.json else "text")
    sys.stdout.write(rendered)
    if args.out is not None:
        print(f"wrote {args.out}", file=sys.stderr)
    return 1 if report.get("violations") else 0


if __name__ == "__main__":
    raise SystemExit(main())
