"""Command-line interface.

Subcommands:
  train    -- run an experiment config across its seeds, writing CSV/JSON records
  compare  -- mean_{std} table plus permutation-test p-values against a baseline
  plot     -- render mixture-weight trajectories to a vector figure + sibling CSV
  oracle   -- run the quadratic hypergradient oracle suite
  stats    -- permutation test between two score files (one number per line)

All state flows through flags and config files; nothing is read from the
environment.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

from .harness import compare_methods, load_config, run_experiment, run_oracle_suite
from .plots import render_trajectories
from .records import run_record_from_json
from .stats import SampleSet, permutation_test


def _cmd_train(args) -> int:
    config = load_config(args.config)
    if args.seeds:
        seeds = tuple(int(s) for s in args.seeds.split(","))
        from dataclasses import replace
        config = replace(config, seeds=seeds)
    summary = run_experiment(config, output_dir=args.out, workers=args.workers)
    failures = [r for r in summary["runs"] if "error" in r]
    for r in summary["runs"]:
        if "error" in r:
            print(f"seed {r['seed']}: ABORTED ({r['error']})")
        else:
            print(f"seed {r['seed']}: test={r['final_test_metric']:.4f} "
                  f"val={r['final_val_metric']:.4f} stop={r['stop_reason']}")
    if summary["metric_mean"] is not None:
        print(f"mean test metric: {summary['metric_mean']:.4f} "
              f"(std {summary['metric_std']:.4f}, {len(summary['runs']) - len(failures)} seeds)")
    return 1 if failures else 0


def _cmd_compare(args) -> int:
    rows, text = compare_methods(args.candidate, args.baseline,
                                 n_permutations=args.permutations, seed=args.seed,
                                 output_dir=args.out)
    print(text)
    return 0


def _cmd_plot(args) -> int:
    record_paths = sorted(Path(args.records).glob("run_seed*.json"))
    if not record_paths:
        print(f"no run_seed*.json records under {args.records}", file=sys.stderr)
        return 1
    records = [run_record_from_json(p) for p in record_paths]
    fig_path, csv_path = render_trajectories(records, args.out, smooth_window=args.smooth)
    print(f"wrote {fig_path} and {csv_path}")
    return 0


def _cmd_oracle(args) -> int:
    config = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            config = json.load(fh)
    summary, all_passed = run_oracle_suite(config, output_dir=args.out)
    for check in summary["checks"]:
        status = "PASS" if check["passed"] else "FAIL"
        print(f"[{status}] {check['name']}: {check['detail']}")
    return 0 if all_passed else 1


def _read_values(path: str) -> List[float]:
    values = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                values.append(float(line))
    return values


def _cmd_stats(args) -> int:
    a = SampleSet(label=Path(args.a).stem, values=tuple(_read_values(args.a)))
    b = SampleSet(label=Path(args.b).stem, values=tuple(_read_values(args.b)))
    p = permutation_test(a, b, n_permutations=args.permutations, seed=args.seed)
    mode = "exhaustive" if args.permutations == 0 else f"{args.permutations} permutations"
    print(f"mean({a.label}) = {a.mean:.6f}")
    print(f"mean({b.label}) = {b.mean:.6f}")
    print(f"p-value ({mode}, two-sided): {p:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tartan",
                                     description="End-task aware auxiliary training lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run an experiment config across seeds")
    p_train.add_argument("--config", required=True, help="experiment config JSON")
    p_train.add_argument("--seeds", default=None, help="comma-separated seed override")
    p_train.add_argument("--out", default=None, help="output directory override")
    p_train.add_argument("--workers", type=int, default=1, help="parallel seed workers")
    p_train.set_defaults(func=_cmd_train)

    p_cmp = sub.add_parser("compare", help="compare methods against a baseline")
    p_cmp.add_argument("--baseline", required=True, help="baseline record directory")
    p_cmp.add_argument("--candidate", nargs="+", required=True, help="candidate record directories")
    p_cmp.add_argument("--permutations", type=int, default=10_000)
    p_cmp.add_argument("--seed", type=int, default=0)
    p_cmp.add_argument("--out", default=None, help="directory for comparison.csv/.txt")
    p_cmp.set_defaults(func=_cmd_compare)

    p_plot = sub.add_parser("plot", help="plot mixture-weight trajectories")
    p_plot.add_argument("--records", required=True, help="directory of run_seed*.json records")
    p_plot.add_argument("--out", required=True, help="output figure path (.svg or .pdf)")
    p_plot.add_argument("--smooth", type=int, default=None, help="moving-average window")
    p_plot.set_defaults(func=_cmd_plot)

    p_oracle = sub.add_parser("oracle", help="run the hypergradient oracle suite")
    p_oracle.add_argument("--config", default=None, help="oracle config JSON (optional)")
    p_oracle.add_argument("--out", default=None, help="output directory override")
    p_oracle.set_defaults(func=_cmd_oracle)

    p_stats = sub.add_parser("stats", help="permutation test between two score files")
    p_stats.add_argument("--a", required=True, help="file with one score per line")
    p_stats.add_argument("--b", required=True, help="file with one score per line")
    p_stats.add_argument("--permutations", type=int, default=10_000,
                         help="0 for exhaustive mode")
    p_stats.add_argument("--seed", type=int, default=0)
    p_stats.set_defaults(func=_cmd_stats)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
