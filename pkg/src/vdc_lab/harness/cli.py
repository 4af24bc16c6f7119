"""Command-line entry point: ``vdc-lab <subcommand> [--config PATH] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .commands import cmd_dump_conditions, cmd_edit, cmd_optimize, cmd_sweep, cmd_train_toy
from .config import RunConfig


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON (defaults apply to missing keys)")
    common.add_argument("--seed", type=int, help="run a single seed instead of the config's seed list")
    common.add_argument("--out", help="output directory (overrides the config's 'out')")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="vdc-lab", description="Toy-scale visual diffusion conditioning experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train-toy", parents=[common], help="train the toy denoiser and check it against the oracle")
    opt = sub.add_parser("optimize", parents=[common], help="learn a steering condition stack per seed")
    opt.add_argument("--denoiser", required=True, help="denoiser bundle directory")
    edit = sub.add_parser("edit", parents=[common], help="apply a stack to an input set and report metrics")
    edit.add_argument("--denoiser", required=True)
    edit.add_argument("--stack", help="stack bundle; omit for the zero-stack reconstruction baseline")
    edit.add_argument("--inputs", help="bundle with 'before' and 'after' tensors; default is the held-out set")
    edit.add_argument("--baseline", action="store_true", help="also report the zero-stack baseline")
    sweep = sub.add_parser("sweep", parents=[common], help="run the configured sweep axes")
    sweep.add_argument("--denoiser", required=True)
    sweep.add_argument("--workers", type=int, help="worker processes (default: VDC_LAB_THREADS or 1)")
    dump = sub.add_parser("dump-conditions", parents=[common], help="write one condition matrix per step")
    dump.add_argument("--stack", required=True)
    return p


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg = cfg.with_overrides(seeds=[args.seed])
        if args.command == "train-toy":
            cfg = cfg.with_overrides(denoiser={"seed": args.seed})
    return cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "dump-conditions":
            paths = cmd_dump_conditions(args.stack, args.out)
            print(f"wrote {len(paths)} condition files to {args.out}")
            return 0
        cfg = _config(args)
        if args.command == "train-toy":
            record = cmd_train_toy(cfg, args.out)
            print(json.dumps(record, indent=2, sort_keys=True))
        elif args.command == "optimize":
            for seed, path in cmd_optimize(cfg, args.denoiser, args.out).items():
                print(f"seed {seed}: {path}")
        elif args.command == "edit":
            for label, rep in cmd_edit(cfg, args.denoiser, args.stack, args.inputs, args.out, args.baseline).items():
                agg = rep.aggregate()["pixel_mse"]["mean"]
                print(f"{label}: n={rep.n} pixel_mse={agg} nfe_per_edit={rep.nfe_per_edit}")
        elif args.command == "sweep":
            summary = cmd_sweep(cfg, args.denoiser, args.out, args.workers)
            print(json.dumps(summary["best_cell"], indent=2, sort_keys=True))
    except Exception as exc:  # report cleanly; tracebacks only with -v
        if args.verbose:
            raise
        print(f"vdc-lab {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
