"""Command-line entry point: ``msgate {gate,dynamics,multigate,oracle,sweep}``."""
from __future__ import annotations

import argparse
import json
import sys

from .analytic import CalibrationError
from .config import PROFILES, ConfigError, RunConfig
from .dynamics import NonConvergenceError
from .experiments import COMMANDS, run_experiment
from .io import _jsonable, write_record

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CALIBRATION = 3
EXIT_NONCONVERGENCE = 4


def _parse_value(text: str):
    for convert in (int, float):
        try:
            return convert(text)
        except ValueError:
            pass
    return text


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msgate", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--profile", choices=sorted(PROFILES), help="parameter profile to start from")
        p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
        p.add_argument("--shots", type=int, help="population and parity shot totals")
        p.add_argument("--out", help="output directory")
        p.add_argument("--workers", type=int, help="worker processes")
        if name == "sweep":
            p.add_argument("--parameter", help="dotted config path, e.g. drive.zeta")
            p.add_argument("--values", help="comma-separated values, e.g. '0 rad,0.785 rad'")
        if name == "multigate":
            p.add_argument("--gates", help="comma-separated gate counts")
    return parser


def config_from_args(args) -> RunConfig:
    if args.config:
        cfg = RunConfig.load(args.config, args.profile)
    else:
        cfg = RunConfig.from_dict({}, args.profile)
    top = {}
    experiment = {"kind": args.command}
    if args.seed is not None:
        top["seed"] = args.seed
    if args.workers is not None:
        top["workers"] = args.workers
    if args.out is not None:
        top["output"] = args.out
    if args.shots is not None:
        if args.shots < 1:
            raise ConfigError("--shots must be >= 1")
        experiment.update(population_shots=args.shots, parity_shots=args.shots)
    if getattr(args, "parameter", None):
        experiment["parameter"] = args.parameter
    if getattr(args, "values", None) is not None:
        experiment["values"] = [_parse_value(v.strip()) for v in args.values.split(",") if v.strip()]
    if getattr(args, "gates", None):
        try:
            experiment["gate_counts"] = [int(v) for v in args.gates.split(",")]
        except ValueError:
            raise ConfigError(f"--gates expects integers, got {args.gates!r}") from None
    return cfg.with_overrides(experiment=experiment, **top)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        record = run_experiment(cfg)
        paths = write_record(record, cfg.resolve().output)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CalibrationError as exc:
        print(f"calibration failed: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION
    except NonConvergenceError as exc:
        print(f"numerical non-convergence: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    print(json.dumps(_jsonable(record.summary), indent=2, sort_keys=True))
    print(f"wrote {paths['summary']}", file=sys.stderr)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
