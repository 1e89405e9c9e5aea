"""Benchmark CLI: replay workload specs and run the point measurements.

Every command boots its own throwaway cluster on loopback, so a run
needs nothing but this package and a writable temp directory.
"""

from __future__ import annotations

import argparse
import sys

from .bench import (CrashReport, SpawnBaselines, measure_crash_latency,
                    measure_spawn_baselines, read_spec_file, run_workload,
                    write_csv)
from .desk import DeskCluster
from .httpapi import dumps_canonical
from .model import ResourceVector


def _cmd_run(args) -> int:
    spec, desk_opts = read_spec_file(args.spec)
    capacity = ResourceVector(int(desk_opts.get("cpu_millicores", 16000)),
                              int(desk_opts.get("mem_bytes", 64 << 30)))
    nodes = int(desk_opts.get("nodes", 5))
    with DeskCluster(nodes, capacity=capacity) as desk:
        records, summary = run_workload(spec, desk)
    write_csv(records, args.out)
    if args.json:
        print(dumps_canonical(summary.to_dict()))
    else:
        print(summary.to_text())
        print(f"csv        {args.out} ({len(records)} rows)", file=sys.stderr)
    return 1 if summary.partial else 0


def _cmd_crash(args) -> int:
    report = measure_crash_latency(trials=args.trials)
    _print_report(report, args.json,
                  {"detect_ms": report.detect_ms,
                   "respawn_ms": report.respawn_ms})
    return 0


def _cmd_spawn_baselines(args) -> int:
    report = measure_spawn_baselines(trials=args.trials)
    _print_report(report, args.json,
                  {"shell_ms": report.shell_ms, "local_ms": report.local_ms,
                   "remote_ms": report.remote_ms})
    return 0


def _print_report(report: CrashReport | SpawnBaselines, as_json: bool,
                  samples: dict) -> None:
    if as_json:
        print(dumps_canonical(samples))
    else:
        print(report.to_text())


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="nefele-bench",
        description="Workload replay and latency measurements on a "
                    "single-host cluster.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="replay a workload spec")
    p_run.add_argument("spec", help="workload TOML")
    p_run.add_argument("--out", required=True, metavar="CSV",
                       help="per-request results file")
    p_run.add_argument("--json", action="store_true",
                       help="print the summary as canonical JSON")
    p_run.set_defaults(fn=_cmd_run)

    p_crash = sub.add_parser("crash", help="crash-detection latency")
    p_crash.add_argument("--trials", type=int, default=100)
    p_crash.add_argument("--json", action="store_true")
    p_crash.set_defaults(fn=_cmd_crash)

    p_spawn = sub.add_parser("spawn-baselines",
                             help="shell vs orchestrated spawn latency")
    p_spawn.add_argument("--trials", type=int, default=50)
    p_spawn.add_argument("--json", action="store_true")
    p_spawn.set_defaults(fn=_cmd_spawn_baselines)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (RuntimeError, OSError, ValueError) as e:
        print(f"nefele-bench: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
