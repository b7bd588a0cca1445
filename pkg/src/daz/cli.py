"""Command-line entry point: ``daz run | validate | list-experiments``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import experiments as E


def _parser():
    p = argparse.ArgumentParser(prog="daz", description="Run sampling experiments and write CSVs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config", help="YAML config path or the name of a bundled config")
    r.add_argument("--sampler", action="append", dest="samplers", metavar="S",
                   help="restrict to this sampler (repeatable)")
    r.add_argument("--seed", type=int)
    r.add_argument("--chains", type=int)
    r.add_argument("--out")
    r.add_argument("--full-scale", action="store_true")
    r.add_argument("--threads", type=int, default=1)

    v = sub.add_parser("validate", help="check a config without running it")
    v.add_argument("config")

    sub.add_parser("list-experiments", help="list experiment names")
    return p


def _load(args):
    cfg = E.load_config(E.resolve_config(args.config))
    if getattr(args, "samplers", None):
        cfg.samplers = list(args.samplers)
    if getattr(args, "seed", None) is not None:
        cfg.base_seed = args.seed
    if getattr(args, "chains", None) is not None:
        cfg.n_chains = args.chains
    if getattr(args, "out", None):
        cfg.output_dir = args.out
    if getattr(args, "full_scale", False):
        cfg.apply_full_scale()
    return cfg


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "list-experiments":
        for name, desc in E.EXPERIMENTS.items():
            print(f"{name:16s} {desc}")
        return 0
    try:
        cfg = _load(args)
    except (E.ConfigError, TypeError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    diags = E.validate_config(cfg)
    for d in diags:
        print(str(d), file=sys.stderr)
    if any(d.level == "error" for d in diags):
        return 1
    if args.command == "validate":
        print("ok")
        return 0
    if args.threads < 1:
        print("config error: --threads must be positive", file=sys.stderr)
        return 1
    try:
        res = E.run_experiment(cfg, n_threads=args.threads, write=False)
        paths = res.write(cfg.output_dir)
    except E.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # any failure during sampling or writing
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    for path in paths:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
