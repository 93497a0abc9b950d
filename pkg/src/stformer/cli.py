"""Command-line entry point.

Exit codes: 0 success, 1 runtime or compatibility error, 2 invalid
configuration or arguments, 3 training divergence.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path
from typing import Sequence

from . import bench
from .config import ConfigError, RunConfig, load_run_config
from .data import BundleError, DatasetBundle, NormStats, WindowError, generate_synthetic, load_bundle, make_windows, write_bundle
from .landmarks import SEGMENT_MEANS, STRATEGIES, ClusterMap
from .model import CheckpointError, load_checkpoint, save_checkpoint
from .training import TrainingDivergence, evaluate, gradient_check, prepare_clusters, tiny_config, train

logger = logging.getLogger("stformer")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

CHECKPOINT_FILE = "checkpoint.npz"
LOG_FILE = "train.log"
METRICS_FILE = "metrics.txt"


class Incompatible(RuntimeError):
    """Checkpoint, config and bundle do not describe the same problem."""


def _load_bundle(path: str) -> DatasetBundle:
    return load_bundle(Path(path))


def _clusters_from_extras(extras: dict, n_clusters: int) -> ClusterMap | None:
    assignment = extras.get("clusters")
    return None if assignment is None else ClusterMap(assignment, n_clusters)


# ------------------------------------------------------------------ subcommands
def cmd_synth(args: argparse.Namespace) -> int:
    bundle = generate_synthetic(args.nodes, args.length, seed=args.seed)
    path = write_bundle(bundle, args.out)
    print(f"wrote synthetic bundle N={args.nodes} L={args.length} to {path}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    run = load_run_config(args.config)
    data_path = run.require("data_path")
    out = Path(args.out or run.out_dir)
    bundle = _load_bundle(data_path)
    cfg = run.model_config(bundle.flow.n_nodes)
    out.mkdir(parents=True, exist_ok=True)

    with (out / LOG_FILE).open("w") as log:
        result = train(
            cfg,
            bundle,
            run.epochs,
            seed=run.seed,
            tcfg=run.train_config(),
            on_epoch=lambda rec: (log.write(rec.to_line() + "\n"), log.flush()),
        )
    extras = {
        "norm_mean": result.stats.mean,
        "norm_std": result.stats.std,
        "seed": run.seed,
        "clusters": None if result.clusters is None else result.clusters.assignment.tolist(),
    }
    save_checkpoint(out / CHECKPOINT_FILE, result.params, cfg, extras)
    test = result.streams[-1]
    report = evaluate(
        result.params, cfg, test, result.stats,
        clusters=result.clusters, batch_size=run.eval_batch_size, seed=run.seed,
    )
    report.write(out / METRICS_FILE)
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    run = load_run_config(args.config)
    params, cfg, extras = load_checkpoint(args.checkpoint)
    bundle = _load_bundle(args.bundle or run.require("data_path"))
    if bundle.flow.n_nodes != cfg.n_nodes:
        raise Incompatible(
            f"checkpoint was trained on N={cfg.n_nodes} nodes "
            f"(adaptive embedding {params['embed.adaptive'].shape}) but the bundle has "
            f"N={bundle.flow.n_nodes}"
        )
    try:
        stats = NormStats(float(extras["norm_mean"]), float(extras["norm_std"]))
    except KeyError:
        raise Incompatible("checkpoint carries no normalization statistics") from None
    clusters = _clusters_from_extras(extras, cfg.n_clusters)
    if clusters is None:
        clusters = prepare_clusters(cfg, bundle)
    test = make_windows(bundle, cfg.T, cfg.T_out, run.split)[-1]
    report = evaluate(
        params, cfg, test, stats, clusters=clusters, batch_size=run.eval_batch_size, seed=run.seed
    )
    out = Path(args.out or run.out_dir)
    report.write(out / METRICS_FILE)
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_approx_report(args: argparse.Namespace) -> int:
    records = bench.approx_report(
        args.n,
        args.seed,
        time_steps=args.T,
        d=args.d,
        trials=args.trials,
        pinv_iterations=args.pinv_iterations,
    )
    path = bench.write_records(Path(args.out) / "approx_report.csv", records)
    for r in records:
        print(f"{r.strategy:>13} m={r.m:<5d} mean={r.mean_abs_error:.3e} max={r.max_abs_error:.3e}")
    print(f"wrote {path}")
    return EXIT_OK


def doubling_sizes(min_n: int, max_n: int) -> list[int]:
    if min_n < 1 or max_n < min_n:
        raise ValueError(f"need 1 <= min-n <= max-n, got {min_n}, {max_n}")
    ns = [min_n]
    while ns[-1] * 2 <= max_n:
        ns.append(ns[-1] * 2)
    return ns


def cmd_bench(args: argparse.Namespace) -> int:
    ns = doubling_sizes(args.min_n, args.max_n)
    with bench.single_threaded():
        records = bench.bench_scaling(
            ns,
            m=args.m,
            strategy=args.strategy,
            exact_cap=args.exact_cap,
            memory_budget=int(args.memory_budget_gib * 2**30),
            min_trials=args.trials,
            rounds=args.rounds,
            seed=args.seed,
            full_model=args.full_model,
        )
    path = bench.write_records(Path(args.out) / "bench_scaling.csv", records)
    for r in records:
        print(f"{r.variant:>8} n={r.n:<6d} median={r.median_seconds * 1e3:9.2f} ms "
              f"trials={r.trials:<3d} peak={r.peak_bytes / 2**20:8.1f} MiB")
    for variant in ("nystrom", "exact"):
        slope = bench.loglog_slope(records, variant)
        if not math.isnan(slope):
            print(f"{variant} log-log slope: {slope:.3f}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    report = gradient_check(tiny_config(args.variant), seed=args.seed)
    for name, err in report.per_param.items():
        print(f"{name:<28} {err:.3e}")
    verdict = "ok" if report.passed else "FAILED"
    print(f"max relative error {report.max_rel_error:.3e} (tolerance {report.tolerance:.0e}): {verdict}")
    return EXIT_OK if report.passed else EXIT_ERROR


# ----------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stformer", description="Spatial-temporal transformer forecasting toolkit."
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset bundle")
    p.add_argument("--out", required=True)
    p.add_argument("--nodes", type=int, default=8)
    p.add_argument("--length", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write checkpoint, log and metrics")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (default: out_dir from the config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--bundle", help="bundle directory (default: data_path from the config)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("approx-report", help="nystrom vs exact attention error table")
    p.add_argument("--n", type=int, required=True, help="sequence length N*T")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--T", type=int, default=12)
    p.add_argument("--d", type=int, default=32, help="head width")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--pinv-iterations", type=int, default=6)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_approx_report)

    p = sub.add_parser("bench", help="attention forward-time scaling benchmark")
    p.add_argument("--max-n", type=int, required=True)
    p.add_argument("--min-n", type=int, default=768)
    p.add_argument("--m", type=int, default=72)
    p.add_argument("--strategy", choices=STRATEGIES, default=SEGMENT_MEANS)
    p.add_argument("--exact-cap", type=int, default=bench.EXACT_BENCH_CAP)
    p.add_argument("--memory-budget-gib", type=float, default=4.0)
    p.add_argument("--trials", type=int, default=9)
    p.add_argument("--rounds", type=int, default=3, help="repeat the sweep, keeping each best median")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--full-model", action="store_true", help="also time a full model forward")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check on a tiny model")
    p.add_argument("--variant", choices=("exact", "nystrom"), default="exact")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except Incompatible as exc:
        print(f"incompatible inputs: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (BundleError, WindowError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
