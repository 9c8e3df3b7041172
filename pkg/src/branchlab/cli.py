"""Command-line front end: one subcommand per experiment kind.

Standard output carries machine-readable results only (the report
JSON, or the covariance matrix for gaussian-cov); progress, warnings,
and errors go to standard error. Exit status is 0 when every gated
statistic passed, 1 when any failed, and 2 for unusable configs or
unwritable output.
"""

from __future__ import annotations

import argparse
import json
import sys

from .harness import EXPERIMENTS, ConfigError, IoError, load_config, render_json, run


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="branchlab",
        description="Subcritical branching-process experiments driven by a JSON config.",
    )
    sub = parser.add_subparsers(dest="experiment", required=True, metavar="<experiment>")
    for kind in EXPERIMENTS:
        cmd = sub.add_parser(kind, help=f"run the {kind} experiment")
        cmd.add_argument("--config", required=True, help="JSON config file")
        cmd.add_argument("--seed", type=int, default=None, help="override the config seed")
        cmd.add_argument("--paths", type=int, default=None, help="override the path count")
        cmd.add_argument("--out", default=None, help="override the output directory")
        cmd.add_argument("--workers", type=int, default=None, help="override the worker count")
        cmd.add_argument(
            "--plot-data", dest="plot_data", action="store_const", const=True, default=None,
            help="also write two-column plot series (x = K or eps, y = ratio)",
        )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {
        key: value
        for key in ("seed", "paths", "out", "workers", "plot_data")
        if (value := getattr(args, key)) is not None
    }
    try:
        config = load_config(args.config)
        declared = config.get("experiment")
        if declared is not None and declared != args.experiment:
            raise ConfigError(
                f"config file says experiment={declared!r} but the subcommand is {args.experiment!r}"
            )
        config.update(overrides)
        config["experiment"] = args.experiment
        result = run(config)
    except (ConfigError, IoError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if result.matrix is not None:
        print(json.dumps(result.matrix))
    else:
        sys.stdout.write(render_json(result.payload))
    return 0 if result.report.passed else 1


if __name__ == "__main__":
    raise SystemExit(main())
