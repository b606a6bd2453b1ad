"""Entry points: `redb-adapter serve` and `redb-adapter conformance`."""

from __future__ import annotations

import argparse
import shlex
import sys

from .conformance import run_conformance
from .echo import AdapterConfig
from .server import serve


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="redb-adapter")
    sub = parser.add_subparsers(dest="command", required=True)

    p_serve = sub.add_parser("serve", help="serve the cluster-echo endpoint on stdio")
    p_serve.add_argument("--no-prenms", action="store_true")
    p_serve.add_argument("--no-train", action="store_true")
    p_serve.add_argument("--cell-size", type=float, default=0.5)
    p_serve.add_argument("--min-points", type=int, default=5)
    p_serve.add_argument("--score-rule", default="saturating",
                         help='"saturating" or "constant:<value>"')

    p_conf = sub.add_parser("conformance", help="check an endpoint command for protocol conformance")
    p_conf.add_argument("--endpoint", required=True, help="endpoint command line")
    p_conf.add_argument("--timeout", type=float, default=30.0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "serve":
        config = AdapterConfig(prenms=not args.no_prenms, train=not args.no_train,
                               cell_size=args.cell_size,
                               min_cluster_points=args.min_points,
                               score_rule=args.score_rule)
        return serve(config, sys.stdin, sys.stdout)
    report = run_conformance(shlex.split(args.endpoint), timeout=args.timeout)
    print(report.render())
    return 0 if report.passed else 1


if __name__ == "__main__":
    sys.exit(main())
