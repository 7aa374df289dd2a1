"""Command line entry point: ``sftcop <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .harness import ConfigError, RunConfig, lambda_ablation, run_sequence, threshold_sweep

log = logging.getLogger("sftcop")


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    over = {}
    if args.output_dir:
        over["output_dir"] = args.output_dir
    if args.seeds:
        over["seeds"] = tuple(args.seeds)
    if args.workers:
        over["workers"] = args.workers
    return replace(cfg, **over) if over else cfg


def _print_totals(label: str, res) -> None:
    f = res.totals("failures")
    u = res.totals("unsafe_reward")
    r = res.totals("total_reward")
    print(f"{label}: failures mean {f.mean():.1f} per seed {f.astype(int).tolist()}, "
          f"total reward mean {r.mean():.2f}, unsafe reward mean {u.mean():.2f}  [{res.directory}]")


def cmd_train(args) -> int:
    cfg = _config(args)
    res = run_sequence(cfg, reuse=not args.force)
    _print_totals(cfg.method, res)
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    if args.periods:
        cfg = replace(cfg, estimation_periods=tuple(args.periods))
    for name, res in lambda_ablation(cfg, reuse=not args.force).items():
        _print_totals(name, res)
    print(f"combined table: {Path(cfg.output_dir) / 'lambda_ablation.csv'}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    if args.taus:
        cfg = replace(cfg, thresholds=tuple(args.taus))
    for tau, res in threshold_sweep(cfg, reuse=not args.force).items():
        _print_totals(f"tau={tau:g}", res)
    print(f"combined table: {Path(cfg.output_dir) / 'threshold_sweep.csv'}")
    return 0


def cmd_consistency(args) -> int:
    from .checks import consistency_instance
    from .dual import consistency_experiment
    from .oracle import load_cmdp

    if args.instance:
        cmdp = load_cmdp(args.instance)
        if not args.policies:
            raise SystemExit("--policies is required with --instance")
        pols = json.loads(Path(args.policies).read_text())
    else:
        cmdp, pols = consistency_instance(args.instance_seed)
    res = consistency_experiment(cmdp, pols, args.state, args.k, args.seeds or list(range(5)))
    print(f"lambda* = {res.lambda_star:.6g}")
    for k, s in res.summary().items():
        print(f"K={k:6d}  median |err| {s['median']:.4g}  IQR [{s['q25']:.4g}, {s['q75']:.4g}]")
    if args.out:
        print(f"wrote {res.write_csv(args.out)}")
    return 0


def cmd_oracle_check(args) -> int:
    from .checks import run_all

    reports = run_all(seed=args.seed, only=args.suite)
    for r in reports:
        print(r.line())
    return 0 if all(r.passed for r in reports) else 1


def cmd_plot(args) -> int:
    from . import plotting

    out = Path(args.out)
    if not args.runs and not args.table:
        raise ValueError("give run directories (LABEL=PATH) or --table")
    if args.table:
        values = plotting.bars_from_table(args.table, args.label_column, args.metric)
        img, csv_path = plotting.plot_bars(values, out, ylabel=args.metric, title=args.title)
    else:
        groups = {}
        for item in args.runs:
            label, sep, path = item.partition("=")
            if not sep:
                label, path = Path(item).name, item
            groups[label] = plotting.metrics_files(path)
        img, csv_path = plotting.plot_curves(groups, args.metric, out, args.block_size, args.title)
    print(f"wrote {img} and {csv_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sftcop", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    def run_args(sp):
        sp.add_argument("--config", help="RunConfig JSON file (defaults otherwise)")
        sp.add_argument("--output-dir")
        sp.add_argument("--seeds", type=int, nargs="+")
        sp.add_argument("--workers", type=int)
        sp.add_argument("--force", action="store_true", help="recompute cached runs")

    sp = sub.add_parser("train", help="sequential multi-task run of one method")
    run_args(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("ablate-lambda", help="fixed 0 / fixed 1 / estimated multipliers")
    run_args(sp)
    sp.add_argument("--periods", type=int, nargs="+", help="estimation periods in steps")
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("sweep-threshold", help="one run per threshold")
    run_args(sp)
    sp.add_argument("--taus", type=float, nargs="+")
    sp.set_defaults(fn=cmd_sweep)

    sp = sub.add_parser("consistency", help="multiplier error against rollout count")
    sp.add_argument("--k", type=int, nargs="+", default=[10, 100, 1000])
    sp.add_argument("--seeds", type=int, nargs="+")
    sp.add_argument("--instance", help="CMDP JSON (see oracle.save_cmdp)")
    sp.add_argument("--policies", help="JSON list of deterministic policies for --instance")
    sp.add_argument("--state", type=int, default=0)
    sp.add_argument("--instance-seed", type=int, default=0,
                    help="seed of the built-in instance search")
    sp.add_argument("--out", help="write per-seed errors as CSV")
    sp.set_defaults(fn=cmd_consistency)

    sp = sub.add_parser("oracle-check", help="property suites against exact oracles")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--suite", nargs="+", help="subset of suites to run")
    sp.set_defaults(fn=cmd_oracle_check)

    sp = sub.add_parser("plot", help="curves from run directories or bars from a combined CSV")
    sp.add_argument("runs", nargs="*", help="LABEL=PATH with PATH a run directory or metrics CSV")
    sp.add_argument("--table", help="combined CSV (lambda_ablation.csv or threshold_sweep.csv)")
    sp.add_argument("--label-column", default="variant")
    sp.add_argument("--metric", default="failures")
    sp.add_argument("--block-size", type=int, default=8)
    sp.add_argument("--title")
    sp.add_argument("--out", required=True, help="image path (.png); the CSV goes alongside")
    sp.set_defaults(fn=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, ValueError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
