"""Host<->DPU message rings.

:class:`ProgressRing` is the multi-producer request ring: producers reserve
space by compare-and-swap on the tail cursor, write their record, then add
its size to the progress cursor.  The single consumer may take everything in
``[head, tail)`` once progress equals tail.  :class:`ResponseRing` is the
single-producer ring carrying responses back.  :class:`FarmRing` and
:class:`LockedRing` are the two benchmark baselines.

Cursors are unwrapped 64-bit byte counts; the physical index is the cursor
modulo the power-of-two capacity.  A record never straddles the physical end
of the data region: a producer that would wrap first publishes a PAD record
covering the remainder.
"""
from __future__ import annotations

import enum
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

from dds_sim import atomics
from dds_sim.accounting import moved
from dds_sim.errors import DDSError, Status
from dds_sim.wire import (OpKind, RESPONSE_HEADER, RESPONSE_HEADER_SIZE, RESPONSE_KIND_PAD,
                          REQUEST_HEADER, encode_pad_request, encode_pad_response)

CACHE_LINE = 64
DEFAULT_CAPACITY = 4 << 20


class RingSignal(enum.Enum):
    OK = "OK"
    RETRY = "RETRY"
    EMPTY = "EMPTY"


OK = RingSignal.OK
RETRY = RingSignal.RETRY
EMPTY = RingSignal.EMPTY


class CursorLayout(enum.Enum):
    """Order of the cursors in the pointer area, one cache line each."""
    PROGRESS_FIRST = "progress_first"   # head, progress, tail
    TAIL_FIRST = "tail_first"           # head, tail, progress (benchmark/test only)


def _offsets(layout: CursorLayout) -> tuple[int, int, int]:
    if layout is CursorLayout.PROGRESS_FIRST:
        return 0, CACHE_LINE, 2 * CACHE_LINE
    return 0, 2 * CACHE_LINE, CACHE_LINE


def _check_capacity(capacity: int) -> None:
    if capacity < CACHE_LINE or capacity & (capacity - 1):
        raise ValueError(f"capacity must be a power of two >= {CACHE_LINE}, got {capacity}")


class ProgressRing:
    """Lock-free multi-producer, single-consumer request ring."""

    def __init__(self, capacity: int = DEFAULT_CAPACITY, max_progress: Optional[int] = None,
                 layout: CursorLayout = CursorLayout.PROGRESS_FIRST) -> None:
        _check_capacity(capacity)
        if max_progress is None:
            max_progress = capacity // 4
        if not 0 < max_progress <= capacity:
            raise ValueError("max_progress must be in (0, capacity]")
        self.capacity = capacity
        self.max_progress = max_progress
        self.layout = layout
        self._mask = capacity - 1
        self.HEAD, self.PROGRESS, self.TAIL = _offsets(layout)
        self.control = bytearray(3 * CACHE_LINE)
        self.data = bytearray(capacity)
        self.cells = atomics.cells(self.control)
        self._mv = memoryview(self.data)

    @property
    def head(self) -> int:
        return self.cells.load(self.HEAD)

    @property
    def progress(self) -> int:
        return self.cells.load(self.PROGRESS)

    @property
    def tail(self) -> int:
        return self.cells.load(self.TAIL)

    def cursors(self) -> tuple[int, int, int]:
        """(head, progress, tail), read in an order that keeps head <= progress <= tail."""
        h = self.cells.load(self.HEAD)
        p = self.cells.load(self.PROGRESS)
        t = self.cells.load(self.TAIL)
        return h, p, t

    def insert(self, record) -> RingSignal:
        """Insert one encoded record; returns OK or RETRY."""
        n = len(record)

        def fill(view):
            view[:] = record
        return self.insert_with(n, fill)

    def insert_with(self, n: int, fill: Callable[[memoryview], object]) -> RingSignal:
        """Reserve ``n`` bytes, let ``fill`` write the record in place, publish it.

        ``fill`` receives a writable view of exactly ``n`` bytes.
        """
        phys = self.reserve(n)
        if phys is None:
            return RETRY
        fill(self._mv[phys:phys + n])
        self.publish(n)
        return OK

    def reserve(self, n: int) -> Optional[int]:
        """Claim ``n`` bytes at the tail; returns their offset, or None when full.

        If the record would not fit before the end of the buffer, the
        remainder is claimed and published as padding first.
        """
        cap = self.capacity
        if n <= 0 or n % CACHE_LINE:
            raise DDSError(Status.LENGTH_MISMATCH, f"record size {n} is not a positive multiple of {CACHE_LINE}")
        if n > self.max_progress:
            raise DDSError(Status.RECORD_TOO_LARGE, f"{n} > min(M, capacity)")
        cells = self.cells
        HEAD, TAIL = self.HEAD, self.TAIL
        mask = self._mask
        while True:
            head = cells.load(HEAD)
            tail = cells.load(TAIL)
            phys = tail & mask
            room = cap - phys
            if room < n:
                if tail - head + room > cap:
                    return None
                if cells.cas(TAIL, tail, tail + room):
                    encode_pad_request(self._mv, phys, room)
                    cells.fetch_add(self.PROGRESS, room)
                continue
            if tail - head + n > self.max_progress:
                return None
            if cells.cas(TAIL, tail, tail + n):
                return phys

    def publish(self, n: int) -> None:
        """Mark ``n`` reserved bytes as fully written."""
        self.cells.fetch_add(self.PROGRESS, n)

    def consume_batch(self):
        """Take every published byte, or RETRY / EMPTY.

        The returned :class:`Batch` views the ring directly; the space is
        not reusable until :meth:`release` is called with it.
        """
        head = self.cells.load(self.HEAD)
        p, t = self.cells.load_pair(self.PROGRESS, self.TAIL) \
            if self.PROGRESS < self.TAIL else self._load_p_then_t()
        if t == head:
            return EMPTY
        if p != t:
            return RETRY
        return Batch(head, t, self._spans(head, t, self._mv))

    def _load_p_then_t(self) -> tuple[int, int]:
        p = self.cells.load(self.PROGRESS)
        return p, self.cells.load(self.TAIL)

    def _spans(self, start: int, end: int, mv) -> list:
        a = start & self._mask
        n = end - start
        if a + n <= self.capacity:
            return [mv[a:a + n]]
        first = self.capacity - a
        return [mv[a:], mv[:n - first]]

    def release(self, batch: "Batch") -> None:
        self.cells.store(self.HEAD, batch.end)


@dataclass
class Batch:
    """A consumed range ``[start, end)`` of a ring, as one or two views."""
    start: int
    end: int
    spans: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.end - self.start

    def records(self, skip_pads: bool = True) -> Iterator[memoryview]:
        """Yield each request record in the batch (PAD records skipped)."""
        for span in self.spans:
            pos = 0
            n = len(span)
            while pos < n:
                op = span[pos + 8]
                total = REQUEST_HEADER.unpack_from(span, pos)[5]
                if total <= 0:
                    raise DDSError(Status.TRUNCATED, "zero-length record in batch")
                if op != OpKind.PAD or not skip_pads:
                    yield span[pos:pos + total]
                pos += total


# -- DMA channel ----------------------------------------------------------------


class DmaChannel:
    """Cost and operation accounting for the host<->DPU DMA engine.

    Each read or write is one operation; simulated cost is
    ``latency`` per operation plus ``per_byte`` per byte moved.  When
    ``realtime_ns`` is set each operation also stalls the calling thread
    (without holding the GIL), which the ring benchmarks use to model the
    round trip of a DMA issued by a separate processor.
    """

    def __init__(self, latency: float = 1.0, per_byte: float = 0.01 / 64,
                 interrupt: Optional[Callable[[], None]] = None,
                 realtime_ns: int = 0) -> None:
        self.latency = latency
        self.per_byte = per_byte
        self.interrupt = interrupt
        self.realtime_ns = realtime_ns
        self.cursor_reads = 0
        self.data_reads = 0
        self.writes = 0
        self.bytes = 0
        self.busy_time = 0.0

    @property
    def ops(self) -> int:
        return self.cursor_reads + self.data_reads + self.writes

    def _op(self, nbytes: int) -> None:
        self.bytes += nbytes
        self.busy_time += self.latency + nbytes * self.per_byte
        if self.realtime_ns:
            atomics.spin(self.realtime_ns)

    def read_cursor(self, cells, offset: int) -> int:
        self.cursor_reads += 1
        self._op(8)
        return cells.load(offset)

    def read_cursor_pair(self, cells, first: int, second: int) -> tuple[int, int]:
        """One read covering two adjacent cursors, lower address first."""
        self.cursor_reads += 1
        self._op(second - first + 8)
        return cells.load_pair(first, second)

    def write_cursor(self, cells, offset: int, value: int) -> None:
        self.writes += 1
        self._op(8)
        cells.store(offset, value)

    def read_spans(self, spans, dst, dst_offsets, path: str) -> None:
        """One scatter-gather read of ``spans`` into ``dst`` at ``dst_offsets``."""
        self.data_reads += 1
        n = 0
        for span, at in zip(spans, dst_offsets):
            k = len(span)
            dst[at:at + k] = span
            n += k
        moved(path, "dma", n)
        self._op(n)

    def write_spans(self, spans, dst, dst_offsets, path: str) -> None:
        self.writes += 1
        n = 0
        for span, at in zip(spans, dst_offsets):
            k = len(span)
            dst[at:at + k] = span
            n += k
        moved(path, "dma", n)
        self._op(n)

    def fire_interrupt(self) -> None:
        if self.interrupt is not None:
            self.interrupt()


@dataclass
class FetchedBatch:
    """A request batch copied by DMA into DPU memory.

    ``spans`` view ``buffer`` (the DPU request buffer), at the same physical
    offsets the records had on the host ring.
    """
    start: int
    end: int
    buffer: object
    spans: list

    @property
    def size(self) -> int:
        return self.end - self.start

    def records(self, skip_pads: bool = True) -> Iterator[memoryview]:
        return Batch(self.start, self.end, self.spans).records(skip_pads)


def dma_fetch(ring: ProgressRing, channel: DmaChannel, into=None, *, path: str = "request_fetch",
              limit: Optional[int] = None):
    """DPU-side consumption of ``ring`` through ``channel``.

    Reads progress and tail (one operation when progress is laid out first,
    two otherwise), then if the ring holds a complete batch reads the data
    in one operation and writes the new head back in a third.  ``into`` is
    the DPU buffer mirroring the ring (a fresh one is allocated if omitted).
    ``limit``, when given, bounds how far past head the fetched batch may end;
    a batch that would exceed it is left on the ring and RETRY returned.
    """
    cells = ring.cells
    head = cells.load(ring.HEAD)  # the DPU owns head; no DMA needed to know it
    if ring.PROGRESS < ring.TAIL:
        p, t = channel.read_cursor_pair(cells, ring.PROGRESS, ring.TAIL)
    else:
        p = channel.read_cursor(cells, ring.PROGRESS)
        t = channel.read_cursor(cells, ring.TAIL)
    if t == head:
        return EMPTY
    if p != t:
        return RETRY
    if limit is not None and t - head > limit:
        return RETRY
    host_spans = ring._spans(head, t, ring._mv)
    if into is None:
        into = bytearray(ring.capacity)
    dst_mv = memoryview(into)
    a = head & ring._mask
    offsets = [a] if len(host_spans) == 1 else [a, 0]
    channel.read_spans(host_spans, dst_mv, offsets, path)
    channel.write_cursor(cells, ring.HEAD, t)
    return FetchedBatch(head, t, into, ring._spans(head, t, dst_mv))


# -- response ring ------------------------------------------------------------


class ResponseRing:
    """Single-producer (DPU), multi-consumer (host threads) response ring.

    The producer writes records then publishes a new tail; consumers of one
    poll group take records under a short critical section around the
    consume step only.
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY) -> None:
        _check_capacity(capacity)
        self.capacity = capacity
        self._mask = capacity - 1
        self.control = bytearray(2 * CACHE_LINE)
        self.data = bytearray(capacity)
        self.cells = atomics.cells(self.control)
        self._mv = memoryview(self.data)
        self._consume_lock = threading.Lock()
        self.HEAD, self.TAIL = 0, CACHE_LINE

    @property
    def head(self) -> int:
        return self.cells.load(self.HEAD)

    @property
    def tail(self) -> int:
        return self.cells.load(self.TAIL)

    def free_space(self) -> int:
        return self.capacity - (self.tail - self.head)

    def insert(self, record) -> RingSignal:
        """Producer-side insert of one encoded response (tests and simple producers)."""
        n = len(record)
        if n % CACHE_LINE or n > self.capacity:
            raise DDSError(Status.RECORD_TOO_LARGE, f"{n}")
        tail = self.tail
        phys = tail & self._mask
        room = self.capacity - phys
        need = n if room >= n else room + n
        if tail - self.head + need > self.capacity:
            return RETRY
        if room < n:
            encode_pad_response(self._mv, phys, room)
            phys = 0
        self._mv[phys:phys + n] = record
        self.cells.store(self.TAIL, tail + need)
        return OK

    def dma_deliver(self, channel: DmaChannel, spans, start: int, path: str) -> None:
        """Write already-formatted response bytes (cursor ``start``) and publish them.

        Callers guarantee no record straddles a multiple of ``capacity``.
        """
        n = sum(len(s) for s in spans)
        if start != self.tail:
            raise DDSError(Status.LENGTH_MISMATCH, f"deliver at {start}, tail is {self.tail}")
        if self.free_space() < n:
            raise DDSError(Status.RING_FULL, "response ring overrun")
        offsets = []
        at = start
        for s in spans:
            offsets.append(at & self._mask)
            at += len(s)
        pieces = []
        offs = []
        for s, o in zip(spans, offsets):
            k = len(s)
            if o + k <= self.capacity:
                pieces.append(s)
                offs.append(o)
            else:
                first = self.capacity - o
                pieces += [s[:first], s[first:]]
                offs += [o, 0]
        channel.write_spans(pieces, self._mv, offs, path)
        self.cells.store(self.TAIL, start + n)
        channel.fire_interrupt()

    def consume(self, handler: Callable[[int, int, memoryview, int], None],
                max_records: Optional[int] = None, blocking: bool = True) -> int:
        """Hand up to ``max_records`` responses to ``handler`` and free their space.

        ``handler(request_id, status, data_view, length)`` runs inside the
        consume critical section and must copy out anything it keeps.
        """
        lock = self._consume_lock
        if not lock.acquire(blocking):
            return 0
        try:
            head = self.cells.load(self.HEAD)
            tail = self.cells.load(self.TAIL)
            mv = self._mv
            mask = self._mask
            done = 0
            unpack = RESPONSE_HEADER.unpack_from
            while head < tail and (max_records is None or done < max_records):
                phys = head & mask
                rid, status, kind, length, total = unpack(mv, phys)
                if total <= 0:
                    raise DDSError(Status.TRUNCATED, "zero-length response")
                if kind != RESPONSE_KIND_PAD:
                    handler(rid, status, mv[phys + RESPONSE_HEADER_SIZE:phys + RESPONSE_HEADER_SIZE + length], length)
                    done += 1
                head += total
            self.cells.store(self.HEAD, head)
            return done
        finally:
            lock.release()


# -- benchmark baselines ------------------------------------------------------


class LockedRing(ProgressRing):
    """Baseline: producers hold a lock across reservation, write and publish."""

    def __init__(self, capacity: int = DEFAULT_CAPACITY, max_progress: Optional[int] = None) -> None:
        super().__init__(capacity, max_progress)
        self._lock = threading.Lock()

    def insert_with(self, n: int, fill) -> RingSignal:
        with self._lock:
            return super().insert_with(n, fill)


FARM_SLOT = 64
_FARM_FLAG = 0          # u64 completion flag, nonzero when the slot holds a message
_FARM_LEN = 8           # u32 message length
_FARM_DATA = 16


class FarmRing:
    """Baseline: fixed slots, each with its own completion flag.

    Producers claim the tail slot by compare-and-swap, write the message,
    then set the slot's flag.  The consumer polls the head slot's flag with
    one DMA read per message and releases each slot with one DMA write that
    clears its flag and publishes the new head; there is no batching.
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY) -> None:
        _check_capacity(capacity)
        self.capacity = capacity
        self.slots = capacity // FARM_SLOT
        self.data = bytearray(capacity)
        self.control = bytearray(2 * CACHE_LINE)
        self.cells = atomics.cells(self.control)
        self.slot_cells = atomics.cells(self.data)
        self._mv = memoryview(self.data)
        self.HEAD, self.TAIL = 0, CACHE_LINE

    @property
    def max_message(self) -> int:
        return FARM_SLOT - _FARM_DATA

    def insert(self, message) -> RingSignal:
        n = len(message)
        if n > self.max_message:
            raise DDSError(Status.RECORD_TOO_LARGE, f"{n} > {self.max_message}")
        cells = self.cells
        while True:
            head = cells.load(self.HEAD)
            tail = cells.load(self.TAIL)
            if tail - head >= self.slots:
                return RETRY
            if cells.cas(self.TAIL, tail, tail + 1):
                break
        base = (tail % self.slots) * FARM_SLOT
        mv = self._mv
        mv[base + _FARM_LEN:base + _FARM_LEN + 4] = n.to_bytes(4, "little")
        mv[base + _FARM_DATA:base + _FARM_DATA + n] = message
        self.slot_cells.store(base + _FARM_FLAG, 1)
        return OK

    def dma_poll(self, channel: DmaChannel, path: str = "farm_fetch"):
        """Fetch the next message (one DMA read) and release its slot (one DMA write)."""
        head = self.cells.load(self.HEAD)
        base = (head % self.slots) * FARM_SLOT
        channel.data_reads += 1
        channel._op(FARM_SLOT)
        if not self.slot_cells.load(base + _FARM_FLAG):
            return EMPTY
        mv = self._mv
        n = int.from_bytes(mv[base + _FARM_LEN:base + _FARM_LEN + 4], "little")
        msg = bytes(mv[base + _FARM_DATA:base + _FARM_DATA + n])
        moved(path, "dma", n)
        channel.writes += 1
        channel._op(8)
        self.slot_cells.store(base + _FARM_FLAG, 0)
        self.cells.store(self.HEAD, head + 1)
        return msg
