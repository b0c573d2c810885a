"""Command-line entry point: one subcommand per experiment kind.

    fairalloc <kind> [--spec FILE] [--out DIR] [--seed N] [--threads N]
                     [--checkpoint PATH]

A spec file (JSON, same schema as ExperimentSpec.to_json_dict) provides the
full configuration; the flags override its output directory, seed, thread
count and checkpoint.  Without a spec file each experiment runs with its
desk-scale defaults.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from .experiments import KINDS, ExperimentSpec, run_experiment


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fairalloc",
        description="fair resource-allocation experiment harness",
    )
    sub = parser.add_subparsers(dest="kind", required=True)
    for kind in KINDS:
        p = sub.add_parser(kind, help=f"run the {kind} experiment")
        p.add_argument("--spec", help="JSON experiment spec file")
        p.add_argument("--out", help="output directory for CSV tables + manifest")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument(
            "--threads", type=int, help="worker threads for per-sample evaluation"
        )
        p.add_argument("--checkpoint", help="trained-parameter checkpoint (npz)")
    return parser


def _load_spec(args) -> ExperimentSpec:
    if args.spec:
        with open(args.spec, encoding="utf-8") as fh:
            d = json.load(fh)
        d["kind"] = args.kind  # the subcommand wins
        spec = ExperimentSpec.from_json_dict(d)
    else:
        spec = ExperimentSpec(kind=args.kind)
    overrides = {}
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    if args.checkpoint is not None:
        overrides["checkpoint"] = args.checkpoint
    return dataclasses.replace(spec, **overrides) if overrides else spec


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    spec = _load_spec(args)
    tables = run_experiment(spec)
    for t in tables:
        print(f"{t.name}: {len(t.rows)} rows", file=sys.stderr)
        if spec.out_dir:
            print(f"  -> {spec.out_dir}/{t.name}.csv", file=sys.stderr)
    if not spec.out_dir:
        # no directory requested: emit the tables on stdout as JSON
        payload = {t.name: t.rows for t in tables}
        json.dump(payload, sys.stdout, indent=1, default=float)
        print()
    return 0


if __name__ == "__main__":
    sys.exit(main())
