"""Offload engine: executes DPU-bound reads and emits responses in order.

Reads go from the device straight into a pooled buffer that already has
room in front for the application response header.  Responses leave as
indirect packets whose payloads are slices of that buffer; the buffer
returns to the pool once the client has acknowledged every packet.
"""
from __future__ import annotations

import enum
import functools
import struct
from typing import Callable, Optional, Sequence

from dds_sim.accounting import ENGINE_READ, copy_into
from dds_sim.errors import Status
from dds_sim.plugins.base import DECLINE
from dds_sim.wire import APP_RESPONSE, APP_RESPONSE_SIZE, AppRequest, FiveTuple

POOL_CLASSES = (1024, 4096, 16384, 65536)
HEADER_ROOM = APP_RESPONSE_SIZE
PACKET_HEADER_SIZE = 54          # Ethernet + IPv4 + TCP, no options
CONTEXT_RING_SIZE = 256
# source ip, source port, destination ip, destination port, seq, ack
_PACKET_ADDR = struct.Struct("<4sH4sHII")


class PoolBuffer:
    __slots__ = ("cls", "index", "mem", "size")

    def __init__(self, cls: int, index: int, mem: memoryview) -> None:
        self.cls = cls
        self.index = index
        self.mem = mem
        self.size = 0

    @property
    def payload(self) -> memoryview:
        return self.mem[HEADER_ROOM:HEADER_ROOM + self.size]

    @property
    def record(self) -> memoryview:
        """Application header plus data, as sent to the client."""
        return self.mem[:HEADER_ROOM + self.size]


class PacketBufferPool:
    """Size-classed arena of read buffers reserved up front."""

    def __init__(self, per_class: int = 512, classes: Sequence[int] = POOL_CLASSES) -> None:
        self.classes = tuple(classes)
        self._arenas = []
        self._free: list[list[PoolBuffer]] = []
        for c in self.classes:
            arena = memoryview(bytearray(per_class * (c + HEADER_ROOM)))
            self._arenas.append(arena)
            stride = c + HEADER_ROOM
            self._free.append([PoolBuffer(c, i, arena[i * stride:(i + 1) * stride])
                               for i in reversed(range(per_class))])
        self.capacity = per_class * len(self.classes)
        self.in_use = 0
        self.peak = 0
        self.failures = 0

    def alloc(self, size: int) -> Optional[PoolBuffer]:
        for i, c in enumerate(self.classes):
            if size <= c:
                free = self._free[i]
                if not free:
                    continue
                buf = free.pop()
                buf.size = size
                self.in_use += 1
                if self.in_use > self.peak:
                    self.peak = self.in_use
                return buf
        self.failures += 1
        return None

    def release(self, buf: PoolBuffer) -> None:
        self._free[self.classes.index(buf.cls)].append(buf)
        self.in_use -= 1


class IndirectPacket:
    """A header placeholder plus a payload view that references a buffer."""
    __slots__ = ("header", "payload")

    def __init__(self, payload: memoryview) -> None:
        self.header = bytearray(PACKET_HEADER_SIZE)
        self.payload = payload

    def populate(self, flow: FiveTuple, seq: int, ack: int) -> None:
        _PACKET_ADDR.pack_into(self.header, 0, _ip(flow.src_ip), flow.src_port,
                               _ip(flow.dst_ip), flow.dst_port, seq & 0xFFFFFFFF, ack & 0xFFFFFFFF)

    def __len__(self) -> int:
        return len(self.payload)


@functools.lru_cache(maxsize=4096)
def _ip(text: str) -> bytes:
    return bytes(int(x) for x in text.split("."))


def build_packets(payload: memoryview, mtu: int) -> list[IndirectPacket]:
    """Segment ``payload`` into ceil(len/mtu) packets that reference it."""
    if mtu <= 0:
        raise ValueError("mtu must be positive")
    payload = memoryview(payload)
    n = len(payload)
    return [IndirectPacket(payload[i:i + mtu]) for i in range(0, n, mtu)]


class CtxStatus(enum.IntEnum):
    FREE = 0
    PENDING = 1
    COMPLETE = 2


class ReadContext:
    __slots__ = ("status", "conn", "request", "op", "buffer", "result")

    def __init__(self) -> None:
        self.status = CtxStatus.FREE
        self.conn = None
        self.request: Optional[AppRequest] = None
        self.op = None
        self.buffer: Optional[PoolBuffer] = None
        self.result = Status.PENDING


class ContextRing:
    def __init__(self, size: int = CONTEXT_RING_SIZE) -> None:
        if size < 1:
            raise ValueError("context ring needs at least one slot")
        self.size = size
        self.slots = [ReadContext() for _ in range(size)]
        self.head = 0
        self.tail = 0

    def full(self) -> bool:
        return self.tail - self.head == self.size

    def occupancy(self) -> int:
        return self.tail - self.head


SendToHost = Callable[[object, list], None]
SendToClient = Callable[[object, list, Callable[[], None]], None]


class OffloadEngine:
    """One engine per director core.

    ``send_to_host(conn, requests)`` returns requests to the host path;
    ``send_to_client(conn, packets, release)`` transmits a response train and
    calls ``release`` when the client has acknowledged it.
    """

    def __init__(self, service, plugin, table, send_to_host: SendToHost,
                 send_to_client: SendToClient, mtu: int = 1500,
                 ring_size: int = CONTEXT_RING_SIZE, pool: Optional[PacketBufferPool] = None,
                 copy_mode: bool = False) -> None:
        self.service = service
        self.plugin = plugin
        self.table = table
        self.send_to_host = send_to_host
        self.send_to_client = send_to_client
        self.mtu = mtu
        self.ring = ContextRing(ring_size)
        self.pool = pool or PacketBufferPool()
        self.copy_mode = copy_mode
        self.on_complete: Optional[Callable[["OffloadEngine"], None]] = None
        self.served = 0
        self.fallback_ring_full = 0
        self.fallback_declined = 0
        self.fallback_no_buffer = 0
        self.errors = 0
        self.served_log: Optional[list] = None    # request ids, when recording routes

    def engine_step(self, conn, reqs: Sequence[AppRequest]) -> None:
        ring = self.ring
        slots, size = ring.slots, ring.size
        plugin, table = self.plugin, self.table
        for i, req in enumerate(reqs):
            self.complete_pending()
            if ring.full():
                rest = list(reqs[i:])
                self.fallback_ring_full += len(rest)
                self.send_to_host(conn, rest)
                break
            op = plugin.off_func(req, table)
            if op is DECLINE:
                self.fallback_declined += 1
                self.send_to_host(conn, [req])
                continue
            buf = self.pool.alloc(op.size)
            if buf is None:
                self.fallback_no_buffer += 1
                self.send_to_host(conn, [req])
                continue
            ctx = slots[ring.tail % size]
            ctx.conn = conn
            ctx.request = req
            ctx.op = op
            ctx.buffer = buf
            ctx.result = Status.PENDING
            ctx.status = CtxStatus.PENDING
            ring.tail += 1
            self.service.submit_read(op.file_id, op.offset, op.size, buf.payload,
                                     self._completion(ctx), ENGINE_READ)
        self.complete_pending()

    def _completion(self, ctx: ReadContext):
        def done(status):
            ctx.result = status
            ctx.status = CtxStatus.COMPLETE
            if self.on_complete is not None:
                self.on_complete(self)
        return done

    def complete_pending(self) -> int:
        """Emit responses for completed contexts from head, stopping at the first pending one.

        Responses for one connection leave as a single packet train.
        """
        ring = self.ring
        slots, size = ring.slots, ring.size
        mtu = self.mtu
        emitted = 0
        trains: dict = {}
        while ring.head < ring.tail:
            ctx = slots[ring.head % size]
            if ctx.status != CtxStatus.COMPLETE:
                break
            buf = ctx.buffer
            rid = ctx.request.request_id
            if self.served_log is not None:
                self.served_log.append(rid)
            if ctx.result == Status.SUCCESS:
                APP_RESPONSE.pack_into(buf.mem, 0, rid, Status.SUCCESS, 0, 0, buf.size)
                record = buf.record
                self.served += 1
            else:
                APP_RESPONSE.pack_into(buf.mem, 0, rid, ctx.result, 0, 0, 0)
                record = buf.mem[:HEADER_ROOM]
                self.errors += 1
            if self.copy_mode:
                staging = bytearray(len(record))
                copy_into(ENGINE_READ, staging, record)
                record = memoryview(staging)
            train = trains.get(id(ctx.conn))
            if train is None:
                train = trains[id(ctx.conn)] = (ctx.conn, [], [])
            train[1].extend(build_packets(record, mtu))
            train[2].append(buf)
            ctx.status = CtxStatus.FREE
            ctx.conn = ctx.request = ctx.op = ctx.buffer = None
            ring.head += 1
            emitted += 1
        for conn, packets, bufs in trains.values():
            self.send_to_client(conn, packets, _releaser(self.pool, bufs))
        return emitted


def _releaser(pool: PacketBufferPool, bufs: list):
    def release():
        for buf in bufs:
            pool.release(buf)
    return release
