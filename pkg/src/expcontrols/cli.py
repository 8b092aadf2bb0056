"""Command-line entry point: ``expcontrols {simulate,diagnose,pretrial,power,validate} SCENARIO``.

Exit status is 0 when the run passes, 2 when a decision rule rejects the
experiment and 1 on any error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .errors import ExpControlsError, ScenarioError
from .runner import EXIT_ERROR, EXIT_PASS, run_diagnose, run_power, run_pretrial, run_simulate
from .scenario import parse_scenario


def _csv(kind):
    def parse(text: str):
        try:
            return [kind(x) for x in text.split(",") if x.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected comma-separated {kind.__name__} values") from None
    return parse


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="expcontrols", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, replications=True):
        sp.add_argument("scenario", type=Path, help="scenario YAML file")
        sp.add_argument("--seed", type=int, help="override the scenario seed")
        if replications:
            sp.add_argument("--replications", type=int, help="number of simulated replications")
        sp.add_argument("--output", type=Path, help="write the report here instead of stdout")
        sp.add_argument("--format", choices=("machine", "summary"), default="summary")

    common(sub.add_parser("simulate", help="simulate the study and apply the decision rules"))
    common(sub.add_parser("diagnose", help="like simulate, with every mean-zero test reported"))
    pre = sub.add_parser("pretrial", help="run a pre-trial protocol")
    common(pre, replications=False)
    pre.add_argument("--protocol", required=True, help="protocol id")
    pre.add_argument("--exclusions-out", type=Path, help="write the exclusion list (registered protocols only)")
    pw = sub.add_parser("power", help="diagnostic power over a grid of arm sizes and flaw magnitudes")
    common(pw)
    pw.add_argument("--rule", help="decision rule id")
    pw.add_argument("--arm-sizes", type=_csv(int))
    pw.add_argument("--magnitudes", type=_csv(float))
    val = sub.add_parser("validate", help="check a scenario file and print its digest")
    val.add_argument("scenario", type=Path)
    return p


def _emit(text: str, output: Path | None) -> None:
    if output is None:
        sys.stdout.write(text)
    else:
        output.write_text(text)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        scenario = parse_scenario(args.scenario)
        if args.command == "validate":
            print(f"ok: {scenario.name} sha256 {scenario.digest}")
            return EXIT_PASS
        if args.command in ("simulate", "diagnose"):
            run = run_simulate if args.command == "simulate" else run_diagnose
            report = run(scenario, args.seed, args.replications or 1)
        elif args.command == "pretrial":
            report = run_pretrial(scenario, args.protocol, args.seed, args.exclusions_out is not None)
            if report.exclusions is not None:
                args.exclusions_out.write_text(json.dumps(report.exclusions.to_dict(), indent=2) + "\n")
        else:
            report = run_power(scenario, args.seed, args.replications, args.arm_sizes, args.magnitudes, args.rule)
    except ScenarioError as exc:
        print(f"error [{exc.module}]: invalid scenario {args.scenario}", file=sys.stderr)
        for e in exc.errors:
            print(f"  - {e}", file=sys.stderr)
        return EXIT_ERROR
    except ExpControlsError as exc:
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"error [io]: {exc}", file=sys.stderr)
        return EXIT_ERROR
    _emit(report.to_json() if args.format == "machine" else report.summary(), args.output)
    return report.exit_status


if __name__ == "__main__":
    sys.exit(main())
