"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 runtime error, 3 a
theory-check assertion failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .config import parse_config
from .data import Partition
from .errors import ConfigError, DataFormatError, ProtocolError
from .experiment import run_experiment, run_theory_checks

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_THEORY = 3

log = logging.getLogger(__name__)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sflsim",
        description="Deterministic split federated learning simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a training experiment")
    run_p.add_argument("--config", help="INI config file (defaults apply when omitted)")
    run_p.add_argument("--variant", help="run only this protocol variant")
    run_p.add_argument("--seed", type=int, help="override the master seed")
    run_p.add_argument("--out", help="override the output directory")

    theory_p = sub.add_parser("theory-check", help="verify the classifier-update closed forms")
    theory_p.add_argument("--classes", type=int, default=10)
    theory_p.add_argument("--dim", type=int, default=None)
    theory_p.add_argument("--eta", type=float, default=0.1)
    theory_p.add_argument(
        "--grid", help="comma-separated prior values for the focus class"
    )
    theory_p.add_argument("--n-total", type=int, default=5000)
    theory_p.add_argument("--out", default="runs")
    theory_p.add_argument(
        "--negative-control",
        action="store_true",
        help="swap the loss columns before verification (self-test; must fail)",
    )

    part_p = sub.add_parser("partition", help="inspect a partition manifest")
    part_p.add_argument("--inspect", required=True, metavar="MANIFEST")
    return parser


def _cmd_run(args: argparse.Namespace) -> int:
    overrides = {}
    if args.variant is not None:
        overrides["variants"] = (args.variant,)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    cfg = parse_config(args.config, overrides)
    manifest = run_experiment(cfg)
    for name, paths in manifest.variant_files.items():
        print(f"{name}: {paths['csv']}")
    print(f"manifest: {os.path.join(cfg.out_dir, 'manifest.json')}")
    return EXIT_OK


def _cmd_theory(args: argparse.Namespace) -> int:
    grid = None
    if args.grid:
        try:
            grid = [float(v) for v in args.grid.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"invalid grid {args.grid!r}") from None
    try:
        report_path, failures = run_theory_checks(
            num_classes=args.classes,
            dim=args.dim,
            eta=args.eta,
            prior_grid=grid,
            n_total=args.n_total,
            out_dir=args.out,
            negative_control=args.negative_control,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    print(f"report: {report_path}")
    if failures:
        for failure in failures:
            print(f"FAIL {failure}")
        return EXIT_THEORY
    print("all ordering assertions passed")
    return EXIT_OK


def _cmd_partition(args: argparse.Namespace) -> int:
    try:
        with open(args.inspect) as fh:
            partition = Partition.from_json(fh.read())
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise DataFormatError(f"cannot read partition manifest: {exc}") from None
    sizes = [ix.size for ix in partition.client_indices]
    print(f"scheme: {json.dumps(partition.scheme, sort_keys=True)}")
    print(f"seed: {partition.seed}")
    print(f"clients: {partition.num_clients}")
    print(f"samples: {sum(sizes)}")
    print(f"sizes: min={min(sizes)} max={max(sizes)} mean={sum(sizes) / len(sizes):.1f}")
    for k, size in enumerate(sizes):
        print(f"client {k}: {size}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("SFLSIM_LOG_LEVEL", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "theory-check":
            return _cmd_theory(args)
        if args.command == "partition":
            return _cmd_partition(args)
        parser.error(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, ProtocolError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - map everything to exit 2
        log.exception("unhandled error")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
