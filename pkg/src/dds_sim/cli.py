"""``dds-sim``: run scenarios, microbenchmarks and image checks."""
from __future__ import annotations

import argparse
import csv
import json
import sys
from typing import Optional, Sequence

from dds_sim import bench
from dds_sim.errors import DDSError, InvariantViolation, Status
from dds_sim.fsck import check_image
from dds_sim.harness.config import load_config, schema_text
from dds_sim.harness.scenario import run_scenario

EXIT_OK = 0
EXIT_PROBLEMS = 1
EXIT_CONFIG = 2
EXIT_INVARIANT = 3


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _write_report_csv(path: str, report: dict) -> None:
    flat = _flatten(report)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(flat))
        w.writeheader()
        w.writerow(flat)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dds-sim", description=__doc__)
    p.add_argument("--print-schema", action="store_true",
                   help="print the scenario file JSON schema and exit")
    sub = p.add_subparsers(dest="command")

    run = sub.add_parser("run", help="run a scenario file")
    run.add_argument("config")
    run.add_argument("--seed", type=int)
    run.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                     help="override a config field, e.g. workload.total_ops=500 (repeatable)")
    run.add_argument("--csv", help="write the report (or benchmark rows) as CSV")
    run.add_argument("--trace", help="write the event trace as CSV")
    run.add_argument("--image", help="save the device image after the run (for fsck)")

    b = sub.add_parser("bench", help="real-thread microbenchmarks")
    bsub = b.add_subparsers(dest="bench", required=True)
    ring = bsub.add_parser("ring", help="ring insertion throughput")
    ring.add_argument("--producers", type=_ints, default=[1, 4, 16, 32, 64])
    ring.add_argument("--kinds", default=",".join(bench.RING_KINDS))
    ring.add_argument("--duration", type=float, default=1.0)
    ring.add_argument("--dma-ns", type=int, default=2000)
    ring.add_argument("--message-size", type=int, default=8)
    ring.add_argument("--csv")
    table = bsub.add_parser("table", help="cache table insert and lookup throughput")
    table.add_argument("--items", type=int, default=200_000)
    table.add_argument("--readers", type=_ints, default=[1, 2, 4, 8])
    table.add_argument("--duration", type=float, default=1.0)
    table.add_argument("--seed", type=int, default=0)
    table.add_argument("--csv")

    fsck = sub.add_parser("fsck", help="check a saved device image")
    fsck.add_argument("image")
    return p


def _print_rows(rows: list) -> None:
    for r in rows:
        print(json.dumps(r.__dict__))


def _bench_ring(producers, kinds, duration, dma_ns, message_size, csv_path) -> int:
    rows = []
    for kind in kinds:
        for n in producers:
            rows.append(bench.bench_ring(kind, n, duration, dma_ns=dma_ns, message_size=message_size))
    _print_rows(rows)
    if csv_path:
        bench.write_csv(csv_path, rows)
    return EXIT_OK


def _bench_table(items, readers, duration, seed, csv_path) -> int:
    rows = bench.bench_table(items, readers, duration, seed=seed)
    _print_rows(rows)
    if csv_path:
        bench.write_csv(csv_path, rows)
    return EXIT_OK


def _run(args) -> int:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    cfg = load_config(args.config, overrides)
    if cfg.kind == "bench_ring":
        rb = cfg.ring_bench
        return _bench_ring(rb.producers, rb.kinds, rb.duration, rb.dma_ns, rb.message_size, args.csv)
    if cfg.kind == "bench_table":
        tb = cfg.table_bench
        return _bench_table(tb.items, tb.readers, tb.duration, cfg.seed, args.csv)
    try:
        result = run_scenario(cfg, keep_trace=bool(args.trace))
    except InvariantViolation as e:
        print(f"invariant violated: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    report = result.report.to_dict()
    print(json.dumps(report, indent=2))
    if args.csv:
        _write_report_csv(args.csv, report)
    if args.trace:
        result.tracer.write_csv(args.trace)
    if args.image:
        service = result.world.service
        if service is None:
            print("--image needs a mode that uses the DPU file service", file=sys.stderr)
            return EXIT_CONFIG
        service.persist_metadata()
        service.device.save_image(args.image)
    return EXIT_OK


def _fsck(path: str) -> int:
    try:
        info = check_image(path)
    except (DDSError, OSError) as e:
        print(f"fsck: {path}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(info, indent=2))
    return EXIT_PROBLEMS if info["problems"] else EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_schema:
        print(schema_text())
        return EXIT_OK
    try:
        if args.command == "run":
            return _run(args)
        if args.command == "bench":
            if args.bench == "ring":
                kinds = [k for k in args.kinds.split(",") if k]
                unknown = set(kinds) - set(bench.RING_KINDS)
                if unknown:
                    parser.error(f"unknown ring kinds: {sorted(unknown)}")
                return _bench_ring(args.producers, kinds, args.duration, args.dma_ns,
                                   args.message_size, args.csv)
            return _bench_table(args.items, args.readers, args.duration, args.seed, args.csv)
        if args.command == "fsck":
            return _fsck(args.image)
    except DDSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG if e.status is Status.CONFIG_INVALID else EXIT_PROBLEMS
    parser.print_help()
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
