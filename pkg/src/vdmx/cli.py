"""Command-line entry point: train, evaluate, ablate, plot, demo-noisydigits.

Exit codes: 0 success, 1 configuration error, 2 runtime abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import harness
from .ndcore import ConfigError


def _load(args) -> harness.RunConfig:
    overrides = {}
    if args.seed is not None:
        overrides["run.seeds"] = str(args.seed)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.config:
        return harness.load_config(args.config, overrides)
    return harness.config_from_mapping(overrides)


def cmd_train(args):
    cfg = _load(args)
    out = args.out or os.path.join(cfg.out_dir, cfg.name)
    res = harness.run_experiment(cfg, out)
    harness.emit_plots(res["csvs"], os.path.join(out, "plots"))
    print(json.dumps({"csvs": res["csvs"], "summary": res["summary"], "checkpoints": res["checkpoints"]}, indent=1))


def cmd_evaluate(args):
    rep = harness.evaluate(args.checkpoint, args.episodes, args.seed or 0)
    rep.pop("returns", None)
    text = json.dumps(rep, indent=1)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "evaluation.json"), "w") as fh:
            fh.write(text + "\n")
    print(text)


def cmd_ablate(args):
    cfg = _load(args)
    out = args.out or os.path.join(cfg.out_dir, "ablations")
    for suite in args.suite:
        print(harness.run_ablation(suite, cfg, out))


def cmd_plot(args):
    out = args.out or os.path.dirname(os.path.abspath(args.csv[0]))
    for p in harness.emit_plots(args.csv, out, args.metric or None):
        print(p)


def cmd_demo(args):
    from .studies import RawStudyConfig, run_noisydigits_demo

    out = args.out or "runs/noisydigits_demo"
    cfg = RawStudyConfig()
    if args.epochs:
        cfg.epochs = args.epochs
    rep = run_noisydigits_demo(out, cfg, args.seed or 0)
    print("VDM decoded-class frequencies from a class-1 state:", np.round(rep["vdm_coverage"], 3).tolist())
    for m in rep["ensemble"]:
        print(f"ensemble member {m['member']}: {m['distinct_classes']} distinct classes, "
              f"class-0 -> class-1 rate {m['class0_to_class1']:.3f}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="override run.seeds with a single seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="vdmx", description="Variational dynamics models for exploration.")
    sub = p.add_subparsers(dest="command", required=True)
    sp = sub.add_parser("train", parents=[common], help="run the exploration loop for every seed")
    sp.set_defaults(func=cmd_train)
    sp = sub.add_parser("evaluate", parents=[common], help="roll out a saved policy")
    sp.add_argument("checkpoint")
    sp.add_argument("--episodes", type=int, default=100)
    sp.set_defaults(func=cmd_evaluate)
    sp = sub.add_parser("ablate", parents=[common], help="run ablation sweeps")
    sp.add_argument("--suite", action="append", required=True,
                    choices=sorted(list(harness.ABLATION_SUITES) + ["skip-sweep"]))
    sp.set_defaults(func=cmd_ablate)
    sp = sub.add_parser("plot", parents=[common], help="SVG curves (mean and std band) from seed CSVs")
    sp.add_argument("csv", nargs="+")
    sp.add_argument("--metric", action="append")
    sp.set_defaults(func=cmd_plot)
    sp = sub.add_parser("demo-noisydigits", parents=[common], help="multimodality demo: VDM vs ensemble")
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_demo)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (harness.RunAborted, FloatingPointError, RuntimeError) as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
