"""Command line entry point: ``ners run | sweep | compare``.

Exit status: 0 on success, 1 on a configuration error, 2 when a run diverged.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .harness import (
    ConfigError,
    compare,
    compare_dirs,
    format_table,
    load_config,
    run_dir_for,
    run_experiment,
    sweep,
    write_summary,
)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2


def _seed_list(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None


def _load(path, args):
    cfg = load_config(path)
    return cfg.with_overrides(sampler=getattr(args, "sampler", None))


def cmd_run(args):
    cfg = _load(args.config, args)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    out = Path(args.out) if args.out else run_dir_for(cfg, seed)
    run_log = run_experiment(cfg, seed, out)
    print(f"{cfg.name} seed {seed}: final return {run_log.final_return:.3f}, AUC {run_log.auc:.3f} -> {out}")
    if run_log.status != "ok":
        print(f"diverged: {run_log.message}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_sweep(args):
    cfg = _load(args.config, args)
    logs = sweep(cfg, args.seeds, args.out, args.workers)
    for lg in logs:
        print(f"{cfg.name} seed {lg.seed}: final return {lg.final_return:.3f}, AUC {lg.auc:.3f}")
    return EXIT_DIVERGED if any(lg.status != "ok" for lg in logs) else EXIT_OK


def cmd_compare(args):
    status = EXIT_OK
    if args.run:
        configs = [_load(p, args) for p in args.run]
        rows, logs = compare(configs, args.seeds, args.root, args.workers)
        if any(lg.status != "ok" for group in logs.values() for lg in group):
            status = EXIT_DIVERGED
    else:
        rows = compare_dirs(args.root)
        if not rows:
            raise ConfigError(f"no run logs found under {args.root}")
    summary = Path(args.summary) if args.summary else Path(args.root) / "summary.csv"
    write_summary(rows, summary)
    print(format_table(rows))
    print(f"summary -> {summary}")
    return status


def build_parser():
    parser = argparse.ArgumentParser(prog="ners", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="one config, one seed")
    p.add_argument("config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="directory for curves.csv / samples.csv")
    p.add_argument("--sampler", help="override the config's sampler")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="one config over several seeds")
    p.add_argument("config")
    p.add_argument("--seeds", type=_seed_list)
    p.add_argument("--out", help="root directory; logs go to <out>/<label>/seed_<k>/")
    p.add_argument("--sampler")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="aggregate run logs into a comparison table")
    p.add_argument("root", help="directory laid out as <label>/seed_<k>/")
    p.add_argument("--run", nargs="+", metavar="CONFIG", help="run these configs into ROOT first")
    p.add_argument("--seeds", type=_seed_list)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--summary", help="summary CSV path (default ROOT/summary.csv)")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
