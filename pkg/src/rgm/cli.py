"""Command-line entry point: ``rgm run|duality-check|sweep|export-heatmap``.

Exit codes: 0 success, 1 configuration or IO error, 2 numerical failure,
3 a result outside its tolerance.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import experiment as ex
from . import exports, oracle
from .solver import DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_TOLERANCE = 0, 1, 2, 3

class ToleranceError(RuntimeError):
    pass


def _add_experiment_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("environment", choices=["gridworld", "randomwalk"])
    p.add_argument("--reward", help="imperfect reward variant (zero, sparse-goal, fire-penalty, "
                                    "sign-flip, full-flip, gaussian-noise)")
    p.add_argument("--config", type=Path, help="YAML experiment config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config field, e.g. solver.alpha=1.0 (repeatable)")
    p.add_argument("--iterations", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--divergence", choices=["kl", "chi2"])
    p.add_argument("--freeze-correction", action="store_true",
                   help="keep the reward correction at zero (plain dual-RL ablation)")
    p.add_argument("--output-dir", help="output root (default: $RGM_OUTPUT_DIR or ./runs)")


def _experiment_config(args, seed=None) -> ex.ExperimentConfig:
    flags = {
        "environment.kind": args.environment,
        "imperfect_reward.variant": args.reward,
        "solver.iterations": args.iterations,
        "solver.alpha": args.alpha,
        "solver.divergence": args.divergence,
        "solver.freeze_correction": True if args.freeze_correction else None,
        "output_dir": args.output_dir,
        "seed": seed,
    }
    return ex.resolve_config(args.config, tuple(args.overrides), flags)


def cmd_run(args) -> int:
    config = _experiment_config(args, args.seed)
    out_dir = ex.output_root(config.output_dir) / config.run_name
    result = ex.run_experiment(config, out_dir)
    s = result.summary
    print(f"wrote {out_dir}")
    print(f"goal_reach_rate={s['goal_reach_rate']:.4f} "
          f"reward_greedy_reach_rate={s['reward_greedy_reach_rate']:.4f} "
          f"reward_gap {s['reward_gap_initial']:.4f} -> {s['reward_gap_final']:.4f}")
    if args.min_goal_reach is not None and s["goal_reach_rate"] < args.min_goal_reach:
        raise ToleranceError(f"goal_reach_rate {s['goal_reach_rate']:.4f} < {args.min_goal_reach}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    seeds = ex.parse_seed_range(args.seeds)
    config = _experiment_config(args)
    root = ex.output_root(config.output_dir) / f"sweep-{config.env_kind}-{config.imperfect_reward.variant}"
    summaries = ex.run_sweep(config, seeds, root, args.workers)
    for s in summaries:
        print(f"seed {s['seed']}: goal_reach_rate={s['goal_reach_rate']:.4f} "
              f"reward_gap_final={s['reward_gap_final']:.4f}")
    print(f"wrote {root}")
    return EXIT_OK


def cmd_duality_check(args) -> int:
    root = ex.output_root(args.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    path = root / "duality_report.csv"
    rows = oracle.write_report(oracle.duality_rows(args.n_instances, args.seed), path)
    bad = oracle.violations(rows, args.tolerance)
    worst = max((r["gap"] for r in rows), default=0.0)
    print(f"{len(rows)} instances, max gap {worst:.3g}, {len(bad)} over tolerance {args.tolerance:g}")
    print(f"wrote {path}")
    if bad:
        raise ToleranceError(f"{len(bad)} instance(s) exceed tolerance {args.tolerance:g}")
    return EXIT_OK


def cmd_export_heatmap(args) -> int:
    table = exports.read_matrix_csv(args.table)
    out = args.output or args.table.with_suffix("." + args.format)
    if out.resolve() == args.table.resolve():
        out = out.with_name(out.stem + ".heatmap" + out.suffix)
    exports.emit_heatmap(table, out, args.format)
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rgm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one seeded experiment")
    _add_experiment_args(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--min-goal-reach", type=float,
                   help="exit with code 3 if goal_reach_rate falls below this value")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run one experiment per seed, in parallel")
    _add_experiment_args(p)
    p.add_argument("--seeds", required=True, help="inclusive range a..b, or a comma list")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("duality-check", help="primal/dual gap on random small MDPs")
    p.add_argument("--n-instances", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_duality_check)

    p = sub.add_parser("export-heatmap", help="render a CSV matrix as CSV or 8-bit PGM")
    p.add_argument("table", type=Path)
    p.add_argument("--format", choices=["pgm", "csv"], default="pgm")
    p.add_argument("--output", type=Path)
    p.set_defaults(func=cmd_export_heatmap)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ex.ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, oracle.OracleError, FloatingPointError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ToleranceError as exc:
        print(f"tolerance violation: {exc}", file=sys.stderr)
        return EXIT_TOLERANCE


if __name__ == "__main__":
    sys.exit(main())
