"""Real-thread microbenchmarks: ring insertion and cache-table access.

These run outside the simulated clock.  Ring consumers go through a
:class:`DmaChannel` whose ``realtime_ns`` stall stands in for the DMA
round trip, so batching (one fetch for many records) pays off the way it
does across PCIe.
"""
from __future__ import annotations

import csv
import hashlib
import random
import struct
import threading
import time
from dataclasses import asdict, dataclass
from typing import Optional

from dds_sim.cachetable import CacheTable
from dds_sim.errors import Status
from dds_sim.ring import (EMPTY, OK, DmaChannel, FarmRing, FetchedBatch, LockedRing, ProgressRing,
                          dma_fetch)
from dds_sim.wire import OpKind, REQUEST_HEADER, REQUEST_HEADER_SIZE, encode_request_into, request_record_size

RING_KINDS = ("progress", "locked", "farm")
# producer id, per-producer sequence number, checksum of both
STRESS_BODY = struct.Struct("<IIQ")


def _checksum(producer: int, seq: int) -> int:
    d = hashlib.blake2b(struct.pack("<II", producer, seq), digest_size=8).digest()
    return int.from_bytes(d, "little")


def _backoff(failures: int) -> None:
    """Yield after a failed insert, sleeping longer the more consecutive failures.

    Spinning producers would otherwise starve the consumer under the GIL.
    """
    time.sleep(0 if failures < 4 else min(1e-3, 1e-6 * (1 << min(failures, 20))))


def make_ring(kind: str, capacity: int):
    if kind == "progress":
        return ProgressRing(capacity)
    if kind == "locked":
        return LockedRing(capacity)
    if kind == "farm":
        return FarmRing(capacity)
    raise ValueError(f"unknown ring kind {kind!r}; expected one of {RING_KINDS}")


def _inserter(ring, kind: str, body_size: int):
    """``insert(body) -> RingSignal`` for any ring kind."""
    if kind == "farm":
        return ring.insert
    size = request_record_size(OpKind.MESSAGE, body_size)

    def insert(body: bytes):
        def fill(view):
            encode_request_into(view, 0, 0, OpKind.MESSAGE, 0, 0, len(body), (body,))
        return ring.insert_with(size, fill)
    return insert


def _drain(ring, kind: str, channel: DmaChannel, into) -> list:
    """One consumer poll; returns the message bodies obtained."""
    if kind == "farm":
        got = ring.dma_poll(channel)
        return [] if got is EMPTY else [got]
    got = dma_fetch(ring, channel, into)
    if not isinstance(got, FetchedBatch):
        return []
    out = []
    for rec in got.records():
        n = REQUEST_HEADER.unpack_from(rec, 0)[4]
        out.append(bytes(rec[REQUEST_HEADER_SIZE:REQUEST_HEADER_SIZE + n]))
    return out


@dataclass
class StressResult:
    kind: str
    producers: int
    per_producer: int
    received: int
    lost: int
    duplicated: int
    torn: int
    out_of_order: int
    seconds: float

    @property
    def ok(self) -> bool:
        return not (self.lost or self.duplicated or self.torn or self.out_of_order)


def stress_ring(kind: str, producers: int, per_producer: int, capacity: int = 1 << 16,
                timeout: float = 60.0) -> StressResult:
    """Producers insert numbered, checksummed records; one consumer checks every one."""
    ring = make_ring(kind, capacity)
    insert = _inserter(ring, kind, STRESS_BODY.size)
    channel = DmaChannel()
    into = bytearray(capacity)
    total = producers * per_producer
    start = threading.Barrier(producers + 1)

    def produce(pid: int) -> None:
        start.wait()
        for seq in range(per_producer):
            body = STRESS_BODY.pack(pid, seq, _checksum(pid, seq))
            failures = 0
            while insert(body) is not OK:
                failures += 1
                _backoff(failures)

    threads = [threading.Thread(target=produce, args=(p,), daemon=True) for p in range(producers)]
    for t in threads:
        t.start()
    next_seq = [0] * producers
    seen = [set() for _ in range(producers)]
    received = duplicated = torn = out_of_order = 0
    t0 = time.perf_counter()
    start.wait()
    deadline = t0 + timeout
    while received + torn < total and time.perf_counter() < deadline:
        bodies = _drain(ring, kind, channel, into)
        if not bodies:
            time.sleep(0)
            continue
        for body in bodies:
            if len(body) != STRESS_BODY.size:
                torn += 1
                continue
            pid, seq, check = STRESS_BODY.unpack(body)
            if pid >= producers or check != _checksum(pid, seq):
                torn += 1
                continue
            received += 1
            if seq in seen[pid]:
                duplicated += 1
                continue
            seen[pid].add(seq)
            if seq != next_seq[pid]:
                out_of_order += 1
            next_seq[pid] = seq + 1
    for t in threads:
        t.join(timeout=1.0)
    distinct = sum(len(s) for s in seen)
    return StressResult(kind, producers, per_producer, received, total - distinct, duplicated,
                        torn, out_of_order, time.perf_counter() - t0)


@dataclass
class RingPoint:
    kind: str
    producers: int
    messages: int
    seconds: float
    mops: float
    dma_ops: int
    messages_per_dma: float


def bench_ring(kind: str, producers: int, duration: float = 1.0, capacity: int = 1 << 20,
               dma_ns: int = 2000, message_size: int = 8) -> RingPoint:
    """Producers insert ``message_size``-byte messages as fast as they can for ``duration``."""
    ring = make_ring(kind, capacity)
    insert = _inserter(ring, kind, message_size)
    body = bytes(message_size)
    channel = DmaChannel(realtime_ns=dma_ns)
    into = bytearray(capacity)
    stop = threading.Event()
    start = threading.Barrier(producers + 1)

    def produce() -> None:
        start.wait()
        failures = 0
        while not stop.is_set():
            if insert(body) is OK:
                failures = 0
            else:
                failures += 1
                _backoff(failures)

    threads = [threading.Thread(target=produce, daemon=True) for _ in range(producers)]
    for t in threads:
        t.start()
    consumed = 0
    start.wait()
    t0 = time.perf_counter()
    end = t0 + duration
    while time.perf_counter() < end:
        got = _drain_count(ring, kind, channel, into)
        if got:
            consumed += got
        else:
            time.sleep(0)
    elapsed = time.perf_counter() - t0
    stop.set()
    for t in threads:
        t.join(timeout=2.0)
    ops = channel.ops
    return RingPoint(kind, producers, consumed, round(elapsed, 4), round(consumed / elapsed / 1e6, 4),
                     ops, round(consumed / ops, 2) if ops else 0.0)


def _drain_count(ring, kind: str, channel: DmaChannel, into) -> int:
    if kind == "farm":
        return 0 if ring.dma_poll(channel) is EMPTY else 1
    got = dma_fetch(ring, channel, into)
    if not isinstance(got, FetchedBatch):
        return 0
    return sum(1 for _ in got.records())


@dataclass
class TablePoint:
    phase: str
    threads: int
    operations: int
    seconds: float
    mops: float
    hits: int
    table_full: int


def bench_table(items: int = 200_000, readers=(1, 2, 4, 8), duration: float = 1.0,
                capacity: Optional[int] = None, seed: int = 0) -> list[TablePoint]:
    """One writer fills the table, then 1..N reader threads look up random resident keys."""
    cap = capacity or int(items / 0.8)
    table = CacheTable(cap, seed=seed)
    rng = random.Random(seed)
    keys = [rng.randbytes(8) for _ in range(items)]
    item = bytes(16)
    t0 = time.perf_counter()
    full = 0
    for k in keys:
        if table.insert(k, item) is Status.TABLE_FULL:
            full += 1
    dt = time.perf_counter() - t0
    points = [TablePoint("insert", 1, items, round(dt, 4), round(items / dt / 1e6, 4),
                         items - full, full)]
    for n in readers:
        counts = [0] * n
        hits = [0] * n
        stop = threading.Event()
        start = threading.Barrier(n + 1)

        def read(i: int) -> None:
            r = random.Random(seed + i)
            lookup = table.lookup
            ks = keys
            m = len(ks)
            done = hit = 0
            start.wait()
            while not stop.is_set():
                for _ in range(256):
                    if lookup(ks[r.randrange(m)]) is not None:
                        hit += 1
                done += 256
            counts[i] = done
            hits[i] = hit

        threads = [threading.Thread(target=read, args=(i,), daemon=True) for i in range(n)]
        for t in threads:
            t.start()
        start.wait()
        t0 = time.perf_counter()
        time.sleep(duration)
        stop.set()
        for t in threads:
            t.join()
        dt = time.perf_counter() - t0
        total = sum(counts)
        points.append(TablePoint("lookup", n, total, round(dt, 4), round(total / dt / 1e6, 4),
                                 sum(hits), 0))
    return points


def write_csv(path, rows: list) -> None:
    if not rows:
        return
    dicts = [asdict(r) for r in rows]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(dicts[0]))
        w.writeheader()
        w.writerows(dicts)
