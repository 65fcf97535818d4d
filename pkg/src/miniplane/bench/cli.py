"""Command-line entry point: ``mp-bench run`` / ``mp-bench report``."""

from __future__ import annotations

import argparse
import os
import sys

from miniplane.bench import harness
from miniplane.workloads import WORKLOADS


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="mp-bench",
        description="Benchmark the analytics control plane.")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one benchmark and write a CSV")
    run.add_argument("--workload", default="logreg",
                     choices=sorted(WORKLOADS))
    run.add_argument("--workers", type=int, default=4)
    run.add_argument("--partitions", type=int, default=64)
    run.add_argument("--iters", type=int, default=30)
    run.add_argument("--mode", default="templates",
                     choices=["tasks", "templates"])
    run.add_argument("--scenario", default="none",
                     help="e.g. templates@10,shrink@20:4,grow@25:8,"
                          "kill@15,migrate@5:10")
    run.add_argument("--csv", default=None, metavar="PATH")
    run.add_argument("--backend", default=None, choices=["inproc", "tcp"],
                     help="default: $MINIPLANE_BACKEND or inproc")
    run.add_argument("--policy", default="locality",
                     choices=["locality", "rr"])
    run.add_argument("--seed", type=int, default=7)
    run.add_argument("--duration", type=float, default=3e-4,
                     help="spinwait task duration in seconds")

    rep = sub.add_parser("report", help="summarize a benchmark CSV")
    rep.add_argument("csv", metavar="PATH")
    return ap


def _print_rows(rows) -> None:
    print("%-5s %-9s %-10s %-9s %-7s %-6s %-6s %-6s %s"
          % ("iter", "wall_ms", "mode", "valid", "workers", "tasks",
             "edits", "msgs", "bytes"))
    for r in rows:
        print("%-5d %-9.3f %-10s %-9s %-7d %-6d %-6d %-6d %d"
              % (r.iteration, r.wall_ms, r.mode, r.validation, r.workers,
                 r.tasks, r.edits, sum(r.msgs.values()), r.bytes_total))


def _run(args) -> int:
    backend = args.backend or os.environ.get("MINIPLANE_BACKEND", "inproc")
    rows = harness.run_bench(
        workload=args.workload, workers=args.workers,
        partitions=args.partitions, iters=args.iters, mode=args.mode,
        scenario=args.scenario, backend=backend, seed=args.seed,
        duration=args.duration, policy=args.policy, csv_path=args.csv)
    _print_rows(rows)
    if args.csv:
        print("wrote %d rows to %s" % (len(rows), args.csv))
    return 0


def _report(args) -> int:
    rows = harness.read_csv(args.csv)
    if not rows:
        print("no rows in %s" % args.csv)
        return 1
    summary = harness.summarize(rows)
    print("%d iterations in %d phase(s)"
          % (summary["iterations"], len(summary["phases"])))
    print("%-12s %-8s %-6s %-12s %-10s %s"
          % ("mode", "workers", "iters", "wall_ms_mean", "msgs_mean",
             "patched"))
    for ph in summary["phases"]:
        print("%-12s %-8d %-6d %-12.3f %-10.1f %d"
              % (ph["mode"], ph["workers"], ph["iterations"],
                 ph["wall_ms_mean"], ph["msgs_mean"], ph["patched"]))
    rate = summary["cache_hit_rate"]
    print("patch cache: %d hits, %d misses%s"
          % (summary["cache_hits"], summary["cache_misses"],
             "" if rate is None else " (%.1f%% hit rate)" % (100 * rate)))
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _run(args)
        return _report(args)
    except harness.BenchError as e:
        print("error: %s" % e, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
