"""Command line front end for experiment configs.

Subcommands: ``run`` trains the paired models described by a config,
``sweep`` repeats a run across penalty weights, ``slope-search`` scans
linear prior slopes, and ``plot`` renders effect curves from a metrics
report to SVG.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import data, harness, priors, scm


def _fmt(value) -> str:
    if value is None:
        return "n/a"
    return f"{value:.6g}" if isinstance(value, float) else str(value)


def _print_arm(name: str, block: dict) -> None:
    fields = " ".join(f"{k}={_fmt(v)}" for k, v in sorted(block.items()))
    print(f"{name}: {fields}")


def _cmd_run(args) -> int:
    config = harness.load_config(args.config)
    metrics = harness.run(config, args.out)
    print(f"run {metrics['name']} config={metrics['config_hash']}")
    for arm in ("erm", "credo"):
        if arm in metrics:
            _print_arm(arm, metrics[arm])
    for key, block in metrics.get("conformity", {}).items():
        for arm, scores in sorted(block.items()):
            _print_arm(f"conformity[{key}] {arm}", scores)
    if args.out:
        print(f"wrote {args.out}/metrics.json")
    return 0


def _cmd_sweep(args) -> int:
    config = harness.load_config(args.config)
    summary = harness.sweep(config, args.lambdas, args.out)
    for key in (f"{v:g}" for v in summary["values"]):
        run = summary["runs"][key]
        arm = run.get("credo", run["erm"])
        print(f"lambda={key} test_loss={_fmt(arm['test_loss'])}")
    if args.out:
        print(f"wrote {args.out}/sweep.json")
    return 0


def _cmd_slope_search(args) -> int:
    config = harness.load_config(args.config)
    report = harness.run_slope_search(config, args.low, args.high, args.step, args.out)
    for value, score in report["scores"]:
        print(f"slope={value:g} score={_fmt(score)}")
    print(f"best slope: {report['best']:g} (score {_fmt(report['best_score'])})")
    if args.out:
        print(f"wrote {args.out}/slope_search.json")
    return 0


def _cmd_plot(args) -> int:
    with open(args.metrics, encoding="utf-8") as fh:
        metrics = json.load(fh)
    for path in harness.plot_metrics(metrics, args.out):
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="credo",
        description="Train models whose learned causal effects match domain priors.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train paired models from an experiment config")
    p.add_argument("config", help="experiment config JSON")
    p.add_argument("--out", help="directory for metrics, config echo, checkpoints")
    p.set_defaults(handler=_cmd_run)

    p = sub.add_parser("sweep", help="repeat a run across penalty weights")
    p.add_argument("config")
    p.add_argument("--lambdas", nargs="+", type=float, required=True, metavar="W")
    p.add_argument("--out")
    p.set_defaults(handler=_cmd_sweep)

    p = sub.add_parser("slope-search", help="scan linear prior slopes by held-out loss")
    p.add_argument("config")
    p.add_argument("--low", type=float, required=True)
    p.add_argument("--high", type=float, required=True)
    p.add_argument("--step", type=float, required=True)
    p.add_argument("--out")
    p.set_defaults(handler=_cmd_slope_search)

    p = sub.add_parser("plot", help="render effect curves from a metrics report")
    p.add_argument("metrics", help="metrics.json produced by run")
    p.add_argument("--out", required=True, help="directory for SVG files")
    p.set_defaults(handler=_cmd_plot)
    return parser


_USER_ERRORS = (
    harness.HarnessError,
    data.DataError,
    priors.PriorError,
    scm.GraphValidationError,
    scm.MediatorFitError,
    FileNotFoundError,
    json.JSONDecodeError,
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except _USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
