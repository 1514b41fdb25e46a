"""Command-line entry point.

Four subcommands share one option set:

    set-transport verify [--filter TEXT] [--config ...] [--seed N]
    set-transport bench
    set-transport train
    set-transport export-attention --checkpoint PATH [--layer L]

Exit codes: 0 success, 1 a check or numerical invariant failed,
2 usage or configuration problems.  Artifacts land in --out (default
`out/`), always including the resolved `effective_config.json`.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import bench as bench_mod
from . import config as config_mod
from . import model as model_mod
from . import numerics
from . import train as train_mod
from . import verify as verify_mod

__all__ = ["main"]


def _fmt(value: float) -> str:
    return repr(float(value))


def _write_lines(path: Path, lines) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _write_json(path: Path, payload) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _resolve_threads(flag: int | None) -> int:
    if flag is not None:
        return max(1, flag)
    env = os.environ.get("SET_TRANSPORT_THREADS")
    if env is not None:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise config_mod.ConfigError(
                f"SET_TRANSPORT_THREADS={env!r} is not an integer") from exc
    return min(4, os.cpu_count() or 1)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="set-transport",
        description="verify, benchmark, train, and inspect transport attention",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None,
                        help="preset name or JSON config path")
    common.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads (falls back to "
                             "SET_TRANSPORT_THREADS)")
    common.add_argument("--out", default="out", help="artifact directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p_verify = sub.add_parser("verify", parents=[common],
                              help="run the property suites")
    p_verify.add_argument("--filter", default=None,
                          help="run only suites whose name contains TEXT")
    p_verify.set_defaults(handler=cmd_verify)

    p_bench = sub.add_parser("bench", parents=[common],
                             help="time both attention mechanisms")
    p_bench.set_defaults(handler=cmd_bench)

    p_train = sub.add_parser("train", parents=[common],
                             help="train a model on the configured task")
    p_train.set_defaults(handler=cmd_train)

    p_export = sub.add_parser("export-attention", parents=[common],
                              help="dump one layer's transport plan as CSV")
    p_export.add_argument("--checkpoint", required=True,
                          help="checkpoint written by `train`")
    p_export.add_argument("--layer", type=int, default=0,
                          help="attention layer index (forward order)")
    p_export.set_defaults(handler=cmd_export)
    return parser


def cmd_verify(args, effective, seed, threads, out: Path) -> int:
    try:
        results, report, code = verify_mod.run_verify(args.filter, seed,
                                                      threads)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name}: {r.cases} cases, {r.failures} failures, "
              f"worst {r.worst:.3e} ({r.seconds:.2f}s)")
    _write_json(out / "verify_report.json", report)
    print(f"report: {out / 'verify_report.json'}")
    return code


def cmd_bench(args, effective, seed, threads, out: Path) -> int:
    b = effective["bench"]
    rows = bench_mod.run_bench(ns=tuple(b["n"]), m=b["m"], d=b["d"],
                               k=b["k"], reps=b["reps"],
                               iterations=b["iterations"], seed=seed)
    lines = [bench_mod.BENCH_HEADER]
    for row in rows:
        lines.append(",".join([
            row["mechanism"], str(row["n"]), str(row["m"]), str(row["d"]),
            str(row["reps"]), _fmt(row["median_seconds"]), _fmt(row["mads"]),
            str(row["multiply_adds"]),
        ]))
        print(f"{row['mechanism']:>4} n={row['n']:<5} "
              f"median {row['median_seconds']:.4f}s "
              f"({row['multiply_adds']} multiply-adds)")
    _write_lines(out / "bench.csv", lines)
    _write_json(out / "bench_info.json", bench_mod.machine_info())
    return 0


def cmd_train(args, effective, seed, threads, out: Path) -> int:
    mcfg = config_mod.build_model_config(effective)
    settings = config_mod.build_train_settings(effective)
    train_set, test_set = config_mod.build_datasets(effective, seed)
    build_seed, fit_seed, loop_seed = numerics.spawn_seeds(seed, 3)
    model = model_mod.build(mcfg, build_seed)
    model_mod.fit_features(model, train_set.inputs, fit_seed)
    started = time.perf_counter()
    model, _, summary = train_mod.train_loop(
        model, train_set, test_set, settings, seed=loop_seed,
        csv_path=str(out / "metrics.csv"))
    model_mod.save_checkpoint(model, str(out / "checkpoint.bin"))
    summary = dict(summary)
    summary["wall_seconds"] = time.perf_counter() - started
    print(json.dumps(summary, sort_keys=True))
    print(f"metrics: {out / 'metrics.csv'}")
    print(f"checkpoint: {out / 'checkpoint.bin'}")
    return 0


def cmd_export(args, effective, seed, threads, out: Path) -> int:
    mcfg = config_mod.build_model_config(effective)
    model = model_mod.build(mcfg, seed)
    model_mod.load_into(model, args.checkpoint)
    _, test_set = config_mod.build_datasets(effective, seed)
    sample = test_set.inputs[:1]
    capture: list = []
    model_mod.forward(model, sample, capture=capture, max_iter=5000)
    if not capture:
        print("error: model has no transport-attention layers",
              file=sys.stderr)
        return 2
    if not 0 <= args.layer < len(capture):
        print(f"error: layer {args.layer} out of range "
              f"(model captured {len(capture)} layers)", file=sys.stderr)
        return 2
    name, info = capture[args.layer]
    plan = np.asarray(ad.val(info.plan))[0, 0]
    n, m = plan.shape
    row_sums = plan.sum(axis=1)
    col_sums = plan.sum(axis=0)
    worst = max(float(np.max(np.abs(row_sums - 1.0 / n))),
                float(np.max(np.abs(col_sums - 1.0 / m))))
    if worst > 1e-6 or float(plan.min()) < 0.0:
        print(f"error: plan for layer {args.layer} ({name}) violates its "
              f"marginals by {worst:.3e}", file=sys.stderr)
        return 1

    plan_lines = ["i,j,value"]
    for i in range(n):
        for j in range(m):
            plan_lines.append(f"{i + 1},{j + 1},{_fmt(plan[i, j])}")
    _write_lines(out / f"plan_layer{args.layer}.csv", plan_lines)

    marginal_lines = ["axis,index,value"]
    for i in range(n):
        marginal_lines.append(f"row,{i + 1},{_fmt(row_sums[i])}")
    for j in range(m):
        marginal_lines.append(f"col,{j + 1},{_fmt(col_sums[j])}")
    _write_lines(out / f"marginals_layer{args.layer}.csv", marginal_lines)
    print(f"layer {args.layer} ({name}): {n}x{m} plan, "
          f"marginal violation {worst:.3e}")
    print(f"plan: {out / f'plan_layer{args.layer}.csv'}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        effective = config_mod.load_config(args.config)
        seed = args.seed if args.seed is not None else int(effective["seed"])
        threads = _resolve_threads(args.threads)
    except config_mod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    effective = {**effective, "seed": seed}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "effective_config.json", effective)
    try:
        return args.handler(args, effective, seed, threads, out)
    except config_mod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
