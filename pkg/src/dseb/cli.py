"""Command-line front end: ``dseb {prepare,train,sweep,embed,probe,verify,report}``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

from . import experiment
from .config import ConfigError, load_config
from .data import DataError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment config file (key = value lines)")
    common.add_argument("--seed", type=int, help="override the config's global seed")
    common.add_argument("--out", help="override the output directory (for embed/probe/verify: output file)")

    p = _Parser(prog="dseb", description="Demographic leakage in contrastive speaker embeddings.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("prepare", parents=[common], help="normalize data, split speakers, cache features")
    sub.add_parser("train", parents=[common], help="train the single run described by the train section")
    sp = sub.add_parser("sweep", parents=[common], help="baseline + lambda sweep + bottleneck grid, then report")
    sp.add_argument("--jobs", type=int, default=1, help="parallel grid points")
    ep = sub.add_parser("embed", parents=[common], help="write an embeddings file for a trained run")
    ep.add_argument("run", help="run directory")
    ep.add_argument("--split", choices=experiment.SPLIT_NAMES, default="test")
    ep.add_argument("--branch", choices=("full", "demo", "residual"), default="full")
    pp = sub.add_parser("probe", parents=[common], help="train probes on one embeddings file, evaluate others")
    pp.add_argument("train_embeddings")
    pp.add_argument("eval_embeddings", nargs="*", help="defaults to the training file itself")
    vp = sub.add_parser("verify", parents=[common], help="score the prepared test trials")
    vp.add_argument("embeddings")
    vp.add_argument("--trials", help="trial CSV (default: prepared test trials)")
    rp = sub.add_parser("report", parents=[common], help="consolidate run directories into tables")
    rp.add_argument("runs", nargs="*", help="run directories (default: all under OUT/runs)")
    return p


def _setup_logging() -> None:
    level = os.environ.get("DSEB_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigError(f"DSEB_LOG must be one of {sorted(levels)}, got '{level}'")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        if args.out and args.command in ("prepare", "train", "sweep", "report"):
            cfg = dataclasses.replace(cfg, out=args.out)
        if args.command == "prepare":
            experiment.cmd_prepare(cfg)
        elif args.command == "train":
            if experiment.cmd_train(cfg) == "diverged":
                print("training diverged", file=sys.stderr)
                return EXIT_DIVERGED
        elif args.command == "sweep":
            if args.jobs < 1:
                raise ConfigError("--jobs must be at least 1")
            statuses = experiment.cmd_sweep(cfg, args.jobs)
            for name, status in statuses.items():
                print(f"{name}\t{status}")
            if any(s == "diverged" for s in statuses.values()):
                return EXIT_DIVERGED
        elif args.command == "embed":
            print(experiment.cmd_embed(cfg, args.run, args.split, args.branch, args.out))
        elif args.command == "probe":
            evals = args.eval_embeddings or [args.train_embeddings]
            out = args.out or "probes.csv"
            experiment.cmd_probe(cfg, args.train_embeddings, {os.path.basename(p): p for p in evals}, out)
            print(out)
        elif args.command == "verify":
            out = args.out or "verification.csv"
            experiment.cmd_verify(cfg, args.embeddings, out, args.trials)
            print(out)
        elif args.command == "report":
            out = experiment.cmd_report(cfg, args.runs or None)
            print((out / "report.txt").read_text(encoding="utf-8"))
    except ConfigError as exc:
        print(f"dseb: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"dseb: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
