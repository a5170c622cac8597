"""Command-line experiment runner.

One subcommand per named experiment plus `validate`. Parameters come from
an optional [experiment]-sectioned key = value config file; `--set` flags
override file values, and every run writes CSV output, optional figures,
and an atomic run manifest. Exit codes: 0 success, 1 configuration error,
2 invariant violation, 3 capacity limit.
"""

import argparse
import sys

from . import config, experiments
from .errors import CapacityError, ConfigError, JumplossError

_EXPERIMENT_HELP = {
    "atom-purity": "two-level atom: purity and population vs loss fraction",
    "atom-method-compare": "two-level atom: faithful and reweighted "
    "trajectories against the master equation",
    "trivial-chain": "monitored chain: rate-rescaled Lindblad reduction",
    "skin-steady-state": "skin chain: steady occupation profile and "
    "domain-wall fit",
    "beta-scan": "skin chain: wall steepness vs loss rate",
    "entropy-scan": "skin chain: trajectory-averaged entanglement entropy",
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="jumploss",
        description="Lindbladian dynamics with partial loss of quantum "
        "jumps: named experiments with seeded, reproducible outputs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in config.EXPERIMENT_NAMES:
        sp = sub.add_parser(name, help=_EXPERIMENT_HELP[name])
        sp.add_argument(
            "--config", metavar="FILE",
            help="key = value config file with an [%(prog)s] section"
            % {"prog": name},
        )
        sp.add_argument(
            "--set", action="append", dest="overrides", metavar="KEY=VALUE",
            default=[], help="override one config key (repeatable)",
        )
        sp.add_argument(
            "--output", metavar="DIR",
            help="output directory (default: $JUMPLOSS_OUTPUT_ROOT/"
            f"{name} or ./runs/{name})",
        )
        sp.add_argument(
            "--seed", type=int, metavar="N",
            help="override master_seed",
        )
        sp.add_argument(
            "--threads", type=int, metavar="N",
            help="worker threads (default: available cores)",
        )
        sp.add_argument(
            "--no-figures", action="store_true",
            help="write delimited output only",
        )
    val = sub.add_parser(
        "validate", help="parse and range-check a config without running"
    )
    val.add_argument("config", metavar="FILE")
    val.add_argument(
        "--experiment", choices=config.EXPERIMENT_NAMES,
        help="check one section only",
    )
    return parser


def _run(args):
    overrides = config.parse_overrides(args.overrides)
    if args.seed is not None:
        overrides["master_seed"] = str(args.seed)
    if args.threads is not None:
        overrides["threads"] = str(args.threads)
    params = config.load_config(args.config, args.command, overrides)
    out_dir = config.resolve_output_dir(args.command, params, args.output)
    manifest = experiments.run_experiment(
        args.command, params, out_dir, figures=not args.no_figures
    )
    print(f"{args.command}: wrote {len(manifest['files'])} file(s) "
          f"+ manifest to {out_dir}")
    for entry in manifest["files"]:
        print(f"  {entry['name']}  ({entry['bytes']} bytes)")
    for key, value in (manifest.get("summary") or {}).items():
        print(f"  {key} = {value}")
    for line in manifest["invariant_log"]:
        print(f"  warning: {line}", file=sys.stderr)
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate":
            print(config.validate_file(args.config, args.experiment))
            return 0
        return _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except CapacityError as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        return 3
    except JumplossError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
