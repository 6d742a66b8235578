"""Command-line front end: one subcommand per experiment driver.

Precedence for every setting: command-line flag, then config file field,
then schema default. The config file is a JSON document with the same
fields as the resolved config each run writes back out.
"""

from __future__ import annotations

import argparse
import sys

from .config import EXPERIMENT_KINDS, load_config_file, resolve_config
from .drivers import run_experiment
from .errors import ConfigError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semnet",
        description="Desk-scale experiments on semantics-aware links: codec "
                    "training, drift adaptation, partial sampling, resource "
                    "orchestration, weight compression, and reporting.")
    sub = parser.add_subparsers(dest="kind", required=True)
    for kind in EXPERIMENT_KINDS:
        p = sub.add_parser(kind, help=f"run the {kind} experiment")
        p.add_argument("--config", metavar="FILE",
                       help="JSON config document; flags override its fields")
        p.add_argument("--seed", type=int, metavar="U64",
                       help="experiment seed (default 0)")
        p.add_argument("--out", metavar="DIR",
                       help="output directory (default semnet-runs/<kind>-seed<seed>)")
        p.add_argument("--data", metavar="DIR",
                       help="dataset directory; overrides SEMNET_DATA")
        if kind == "report":
            p.add_argument("csvs", nargs="*", metavar="CSV",
                           help="metrics tables to plot and summarize")
    return parser


def config_from_args(args: argparse.Namespace):
    doc = load_config_file(args.config) if args.config else {}
    if "kind" in doc and doc["kind"] != args.kind:
        raise ConfigError(f"config file is for {doc['kind']!r} but the "
                          f"{args.kind!r} subcommand was invoked")
    seed = args.seed if args.seed is not None else doc.get("seed", 0)
    out_dir = args.out or doc.get("out_dir") or ""
    data_dir = args.data or doc.get("data_dir")
    overrides = dict(doc.get("params", {}))
    if args.kind == "report" and getattr(args, "csvs", None):
        overrides["report.inputs"] = list(args.csvs)
    return resolve_config(args.kind, seed=seed, out_dir=out_dir,
                          data_dir=data_dir, overrides=overrides)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = config_from_args(args)
    except ConfigError as e:
        print(f"semnet: {e}", file=sys.stderr)
        return 2
    status = run_experiment(config)
    if status == 0:
        print(f"artifacts written to {config.out_dir}")
    else:
        print(f"semnet: run failed, see {config.out_dir}/error.json",
              file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
