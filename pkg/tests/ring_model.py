"""Exhaustive interleaving check of the request ring.

Each producer's insert is split at the points where other threads can
observe it: the reservation (compare-and-swap on the tail) and the
fill-then-publish (progress increment).  The consumer may take a batch at
any point.  Every reachable state is visited once; every transition out of
it is taken.
"""
from __future__ import annotations

import hashlib
import struct

from dds_sim.errors import DDSError
from dds_sim.ring import EMPTY, FetchedBatch, DmaChannel, ProgressRing, dma_fetch
from dds_sim.wire import OpKind, REQUEST_HEADER, REQUEST_HEADER_SIZE, encode_request_into

BODY = struct.Struct("<II8s")


def _check(p: int, j: int) -> bytes:
    return hashlib.blake2b(bytes([p, j]), digest_size=8).digest()


def _fill(view, p: int, j: int) -> None:
    body = BODY.pack(p, j, _check(p, j))
    n = len(view) - REQUEST_HEADER_SIZE
    encode_request_into(view, 0, p << 8 | j, OpKind.MESSAGE, 0, 0, n, (body + bytes(n - len(body)),))


class Violation(AssertionError):
    pass


def explore(sizes, capacity=256, max_progress=None):
    """Returns (states visited, complete executions reached)."""
    ring = ProgressRing(capacity, max_progress or capacity)
    channel = DmaChannel()
    into = bytearray(capacity)
    producers = len(sizes)
    total = sum(len(s) for s in sizes)

    def snapshot():
        return bytes(ring.control), bytes(ring.data)

    def restore(mem):
        ring.control[:] = mem[0]
        ring.data[:] = mem[1]

    start = (snapshot(), tuple((0, None) for _ in sizes), tuple(0 for _ in sizes))
    seen = {start}
    stack = [start]
    finished = 0
    while stack:
        mem, pcs, got = stack.pop()
        successors = []
        for p in range(producers):
            j, phys = pcs[p]
            if j == len(sizes[p]):
                continue
            restore(mem)
            n = sizes[p][j]
            if phys is None:
                r = ring.reserve(n)
                after = snapshot()
                if r is None and after == mem:
                    continue                     # a failed attempt that changed nothing
                pc = (j, r)
            else:
                _fill(ring._mv[phys:phys + n], p, j)
                ring.publish(n)
                after = snapshot()
                pc = (j + 1, None)
            successors.append((after, pcs[:p] + (pc,) + pcs[p + 1:], got))
        restore(mem)
        h, prog, t = ring.cursors()
        if not h <= prog <= t or t - h > capacity:
            raise Violation(f"cursor order broken: head={h} progress={prog} tail={t}")
        batch = dma_fetch(ring, channel, into)
        if isinstance(batch, FetchedBatch):
            nxt = list(got)
            try:
                records = list(batch.records())
            except DDSError as e:
                raise Violation(f"unreadable batch: {e}") from e
            for rec in records:
                n = REQUEST_HEADER.unpack_from(rec, 0)[4]
                p, j, check = BODY.unpack_from(rec, REQUEST_HEADER_SIZE)
                if p >= producers or j >= len(sizes[p]) or check != _check(p, j) \
                        or len(rec) != sizes[p][j] or n != len(rec) - REQUEST_HEADER_SIZE:
                    raise Violation(f"torn record {bytes(rec[:48]).hex()}")
                if j != nxt[p]:
                    raise Violation(f"producer {p}: record {j} arrived, expected {nxt[p]}")
                nxt[p] += 1
            successors.append((snapshot(), pcs, tuple(nxt)))
        elif not successors:
            if sum(got) != total:
                raise Violation(f"stuck with {sum(got)}/{total} records delivered: {pcs}")
            if batch is not EMPTY:
                raise Violation("terminal state with unpublished bytes")
            finished += 1
        for s in successors:
            if s not in seen:
                seen.add(s)
                stack.append(s)
    return len(seen), finished
