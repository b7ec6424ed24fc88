"""DPU file service: segment-mapped files, zero-copy request execution and
ordered response delivery.

Per poll group the service keeps a request buffer mirroring the host request
ring and a response buffer whose slots are pre-allocated before each I/O is
submitted.  Device reads land directly in their response slot; device
writes take their source straight from the fetched request.  Three cursors
over the response buffer keep delivery in request order:

``tail_a``  end of pre-allocated slots
``tail_b``  end of slots whose I/O has finished, scanned in order
``tail_c``  end of slots already written back to the host response ring
"""
from __future__ import annotations

import logging
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from dds_sim import accounting
from dds_sim.accounting import DEVICE_TO_HOST, ENGINE_READ, HOST_WRITE, moved
from dds_sim.blockdev import READ, WRITE, BlockDevice
from dds_sim.errors import DDSError, Status
from dds_sim.plugins.base import ReadOp, WriteOp
from dds_sim.ring import DmaChannel, FetchedBatch, ProgressRing, ResponseRing, dma_fetch
from dds_sim.wire import (OpKind, READ_KINDS, REQUEST_HEADER, REQUEST_HEADER_SIZE,
                          RESPONSE_HEADER, RESPONSE_HEADER_SIZE, RESPONSE_KIND_DATA,
                          RESPONSE_STATUS_OFFSET, WRITE_KINDS, encode_pad_response,
                          response_record_size)

log = logging.getLogger(__name__)

SEGMENT_SIZE = 1 << 20
BLOCK_SIZE = 512
METADATA_SEGMENT = 0
NAME_LEN = 64


@dataclass(frozen=True)
class Span:
    """A piece of a file range that lies inside one segment."""
    segment: int
    first_block: int      # within the segment
    end_block: int        # exclusive, within the segment
    device_offset: int    # absolute byte address
    length: int


class SegmentAllocator:
    """First-fit bitmap over fixed-size segments; one segment is reserved."""

    def __init__(self, total: int, reserved: int = METADATA_SEGMENT) -> None:
        if total < 2:
            raise ValueError("need at least one data segment besides the reserved one")
        self.total = total
        self.reserved = reserved
        self.bitmap = bytearray((total + 7) // 8)
        self._set(reserved)
        self._hint = 0

    def _set(self, i: int) -> None:
        self.bitmap[i >> 3] |= 1 << (i & 7)

    def is_allocated(self, i: int) -> bool:
        return bool(self.bitmap[i >> 3] & (1 << (i & 7)))

    def allocate(self) -> int:
        for i in range(self._hint, self.total):
            if not self.is_allocated(i):
                self._set(i)
                self._hint = i + 1
                return i
        raise DDSError(Status.NO_SPACE, "no free segment")

    def free(self, i: int) -> None:
        if i == self.reserved:
            raise ValueError("the metadata segment is never freed")
        self.bitmap[i >> 3] &= ~(1 << (i & 7)) & 0xFF
        self._hint = min(self._hint, i)

    @property
    def used(self) -> int:
        """Segments owned by files (the reserved segment is not counted)."""
        return sum(bin(b).count("1") for b in self.bitmap) - 1

    @property
    def free_count(self) -> int:
        return self.total - self.used - 1

    def load(self, bitmap: bytes) -> None:
        if len(bitmap) != len(self.bitmap):
            raise DDSError(Status.CORRUPT_METADATA, "bitmap size mismatch")
        self.bitmap[:] = bitmap
        if not self.is_allocated(self.reserved):
            raise DDSError(Status.CORRUPT_METADATA, "reserved segment marked free")
        self._hint = 0


@dataclass
class FileMapping:
    file_id: int
    dir_id: int
    name: str
    size: int = 0
    segments: list = field(default_factory=list)


# -- response buffer ---------------------------------------------------------


class Slot:
    __slots__ = ("start", "size", "phys", "request_id", "op", "file_id", "offset",
                 "length", "view", "req_cursor", "pad")

    def __init__(self, start, size, phys, request_id, op, file_id, offset, length, view,
                 req_cursor, pad=False):
        self.start = start
        self.size = size
        self.phys = phys
        self.request_id = request_id
        self.op = op
        self.file_id = file_id
        self.offset = offset
        self.length = length
        self.view = view
        self.req_cursor = req_cursor
        self.pad = pad


class ResponseBuffer:
    """DPU-side staging for responses, with allocated/buffered/completed tails.

    ``boundary`` is the host response ring capacity; no slot straddles a
    multiple of it, so delivered records land contiguously on the host ring.
    """

    def __init__(self, capacity: int, boundary: int) -> None:
        if capacity % boundary:
            raise ValueError("capacity must be a multiple of the host ring capacity")
        self.capacity = capacity
        self.boundary = boundary
        self.data = bytearray(capacity)
        self._mv = memoryview(self.data)
        self.tail_a = 0
        self.tail_b = 0
        self.tail_c = 0
        self.slots: deque = deque()      # allocated, not yet scanned past
        self.buffered_since: Optional[float] = None

    def occupancy(self) -> int:
        return self.tail_a - self.tail_c

    def preallocate(self, request_id: int, op: int, length: int, *, file_id: int = 0,
                    offset: int = 0, req_cursor: int = 0, data_len: Optional[int] = None) -> Slot:
        """Reserve a response slot and mark it PENDING.

        ``length`` is the number of data bytes the response will carry (the
        requested size for reads, zero otherwise).
        """
        size = response_record_size(OpKind.READ, length) if length else response_record_size(OpKind.WRITE, 0)
        a = self.tail_a
        pad = 0
        into = a % self.boundary
        if into + size > self.boundary:
            pad = self.boundary - into
        if a + pad + size - self.tail_c > self.capacity:
            raise DDSError(Status.BACKPRESSURE, "response buffer full")
        mv = self._mv
        if pad:
            phys = a % self.capacity
            encode_pad_response(mv, phys, pad)
            self.slots.append(Slot(a, pad, phys, 0, OpKind.PAD, 0, 0, 0, None, req_cursor, True))
            a += pad
        phys = a % self.capacity
        RESPONSE_HEADER.pack_into(mv, phys, request_id, Status.PENDING, RESPONSE_KIND_DATA,
                                  length, size)
        view = mv[phys + RESPONSE_HEADER_SIZE:phys + RESPONSE_HEADER_SIZE + length] if length else None
        slot = Slot(a, size, phys, request_id, op, file_id, offset,
                    length if data_len is None else data_len, view, req_cursor)
        self.slots.append(slot)
        self.tail_a = a + size
        return slot

    def set_status(self, slot: Slot, status: int, length: Optional[int] = None) -> None:
        if length is not None:
            struct.pack_into("<I", self._mv, slot.phys + 12, length)
        self._mv[slot.phys + RESPONSE_STATUS_OFFSET] = int(status)

    def status(self, slot: Slot) -> int:
        return self._mv[slot.phys + RESPONSE_STATUS_OFFSET]

    def scan(self, on_slot: Optional[Callable[[Slot, int], None]] = None, now: float = 0.0) -> int:
        """Advance ``tail_b`` over finished slots, stopping at the first PENDING one."""
        mv = self._mv
        slots = self.slots
        n = 0
        while slots:
            slot = slots[0]
            st = mv[slot.phys + RESPONSE_STATUS_OFFSET]
            if st == Status.PENDING and not slot.pad:
                break
            slots.popleft()
            if on_slot is not None and not slot.pad:
                on_slot(slot, st)
            self.tail_b = slot.start + slot.size
            n += 1
        if n and self.buffered_since is None and self.tail_b > self.tail_c:
            self.buffered_since = now
        return n

    def deliverable_spans(self) -> list:
        """Views of ``[tail_c, tail_b)`` in the buffer (one or two)."""
        c, b = self.tail_c, self.tail_b
        n = b - c
        pc = c % self.capacity
        if pc + n <= self.capacity:
            return [self._mv[pc:pc + n]]
        first = self.capacity - pc
        return [self._mv[pc:], self._mv[:n - first]]

    def mark_delivered(self) -> None:
        self.tail_c = self.tail_b
        self.buffered_since = None


# -- groups ------------------------------------------------------------------


class GroupState:
    """DPU-side state for one host poll group."""

    def __init__(self, group_id: int, request_ring: ProgressRing, response_ring: ResponseRing,
                 channel: DmaChannel, response_capacity: Optional[int] = None) -> None:
        self.group_id = group_id
        self.request_ring = request_ring
        self.response_ring = response_ring
        self.channel = channel
        self.request_buffer = bytearray(request_ring.capacity)
        self.responses = ResponseBuffer(response_capacity or 2 * response_ring.capacity,
                                        response_ring.capacity)
        self.backlog: deque = deque()    # (record view, batch start cursor)
        self.requests = 0
        self.fetches = 0

    def request_floor(self) -> int:
        """Oldest request cursor whose bytes may still be referenced."""
        if self.backlog:
            return self.backlog[0][1]
        slots = self.responses.slots
        if slots:
            return slots[0].req_cursor
        return self.request_ring.cells.load(self.request_ring.HEAD)


@dataclass
class StepReport:
    fetched_bytes: int = 0
    requests: int = 0
    submissions: int = 0
    scanned: int = 0
    delivered_bytes: int = 0
    dma_time: float = 0.0

    @property
    def idle(self) -> bool:
        return not (self.fetched_bytes or self.requests or self.submissions
                    or self.scanned or self.delivered_bytes)


_META_MAGIC = b"DDSMETA\x00"
_IMG_MAGIC = b"DDSIMG\x00\x00"
META_VERSION = 1
_SUPER = struct.Struct("<8sIIQI")            # magic, version, active copy, generation, image length
_IMG_HEAD = struct.Struct("<8sIIIIIIIII")    # magic, version, seg size, block size, segments,
#                                              dirs, files, segrefs, next dir id, next file id
_DIR_REC = struct.Struct(f"<I{NAME_LEN}s")
_FILE_REC = struct.Struct(f"<II{NAME_LEN}sQII")  # id, dir, name, size, seg count, first segref


class FileService:
    """The DPU back end for host file I/O and offloaded reads."""

    def __init__(self, device: BlockDevice, segment_size: int = SEGMENT_SIZE,
                 clock: Optional[Callable[[], float]] = None, copy_mode: bool = False,
                 batch_threshold: int = 1, flush_deadline: float = 50.0) -> None:
        if segment_size % device.block_size:
            raise ValueError("segment size must be a multiple of the block size")
        if device.capacity % segment_size:
            raise ValueError("device capacity must be a multiple of the segment size")
        self.device = device
        self.segment_size = segment_size
        self.block_size = device.block_size
        self.clock = clock or (lambda: 0.0)
        self.copy_mode = copy_mode
        self.batch_threshold = batch_threshold
        self.flush_deadline = flush_deadline
        self.alloc = SegmentAllocator(device.capacity // segment_size)
        self.dirs: dict[int, str] = {}
        self._dir_names: dict[str, int] = {}
        self.files: dict[int, FileMapping] = {}
        self._file_names: dict[tuple[int, str], int] = {}
        self._next_dir = 1
        self._next_file = 1
        self.groups: list[GroupState] = []
        self.plugin = None
        self.table = None
        self.hook_stats = {"cache_inserts": 0, "cache_deletes": 0, "table_full": 0}
        self.on_wake: Optional[Callable[[], None]] = None

    # -- control plane --------------------------------------------------------

    def format(self) -> None:
        self.alloc = SegmentAllocator(self.device.capacity // self.segment_size)
        self.dirs.clear()
        self._dir_names.clear()
        self.files.clear()
        self._file_names.clear()
        self._next_dir = self._next_file = 1
        self.persist_metadata()

    def create_directory(self, name: str) -> int:
        _check_name(name)
        if name in self._dir_names:
            raise DDSError(Status.NAME_EXISTS, f"directory {name!r}")
        did = self._next_dir
        self._next_dir += 1
        self.dirs[did] = name
        self._dir_names[name] = did
        return did

    def create_file(self, dir_id: int, name: str) -> int:
        _check_name(name)
        if dir_id not in self.dirs:
            raise DDSError(Status.NOT_FOUND, f"directory {dir_id}")
        if (dir_id, name) in self._file_names:
            raise DDSError(Status.NAME_EXISTS, f"file {name!r}")
        fid = self._next_file
        self._next_file += 1
        self.files[fid] = FileMapping(fid, dir_id, name)
        self._file_names[(dir_id, name)] = fid
        return fid

    def find_directory(self, name: str) -> int:
        try:
            return self._dir_names[name]
        except KeyError:
            raise DDSError(Status.NOT_FOUND, f"directory {name!r}") from None

    def find_file(self, dir_id: int, name: str) -> int:
        try:
            return self._file_names[(dir_id, name)]
        except KeyError:
            raise DDSError(Status.NOT_FOUND, f"file {name!r}") from None

    def file_size(self, file_id: int) -> int:
        return self._file(file_id).size

    def _file(self, file_id: int) -> FileMapping:
        f = self.files.get(file_id)
        if f is None:
            raise DDSError(Status.NOT_FOUND, f"file {file_id}")
        return f

    def register_group(self, request_ring: ProgressRing, response_ring: ResponseRing,
                       channel: DmaChannel) -> GroupState:
        g = GroupState(len(self.groups), request_ring, response_ring, channel)
        self.groups.append(g)
        return g

    def set_offload(self, plugin, table) -> None:
        """Install the plugin whose Cache/Invalidate hooks maintain ``table``."""
        self.plugin = plugin
        self.table = table

    # -- address translation --------------------------------------------------

    def translate(self, file_id: int, offset: int, length: int, allocate: bool = False) -> list[Span]:
        """Split ``[offset, offset+length)`` of a file into per-segment device spans.

        Reads must lie within the file size.  With ``allocate`` (writes) the
        file grows and segments are allocated first-fit on demand.
        """
        f = self._file(file_id)
        end = offset + length
        if offset < 0 or length < 0:
            raise DDSError(Status.OUT_OF_RANGE, "negative range")
        seg = self.segment_size
        if allocate:
            need = -(-end // seg)
            got = []
            try:
                while len(f.segments) + len(got) < need:
                    got.append(self.alloc.allocate())
            except DDSError:
                for s in got:
                    self.alloc.free(s)
                raise
            f.segments.extend(got)
            if end > f.size:
                f.size = end
        elif end > f.size:
            raise DDSError(Status.OUT_OF_RANGE, f"[{offset}, {end}) beyond size {f.size}")
        spans = []
        bs = self.block_size
        pos = offset
        segs = f.segments
        while pos < end:
            idx, within = divmod(pos, seg)
            n = min(end - pos, seg - within)
            s = segs[idx]
            spans.append(Span(s, within // bs, -(-(within + n) // bs), s * seg + within, n))
            pos += n
        return spans

    # -- data plane -----------------------------------------------------------

    def service_loop_step(self) -> StepReport:
        """One pass over every group: fetch, execute, scan, deliver."""
        rep = StepReport()
        now = self.clock()
        for g in self.groups:
            before = g.channel.busy_time
            self._fetch(g, rep)
            self._execute_backlog(g, rep, now)
            rep.scanned += self.scan_completions(g, now)
            rep.delivered_bytes += self.deliver_responses(g, now)
            rep.dma_time += g.channel.busy_time - before
        return rep

    def _fetch(self, g: GroupState, rep: StepReport) -> None:
        if g.backlog:
            return
        ring = g.request_ring
        head = ring.cells.load(ring.HEAD)
        limit = ring.capacity - (head - g.request_floor())
        if limit <= 0:
            return
        got = dma_fetch(ring, g.channel, g.request_buffer, path=HOST_WRITE, limit=limit)
        if not isinstance(got, FetchedBatch):
            return
        g.fetches += 1
        rep.fetched_bytes += got.size
        for rec in got.records():
            g.backlog.append((rec, got.start))

    def _execute_backlog(self, g: GroupState, rep: StepReport, now: float) -> None:
        backlog = g.backlog
        while backlog:
            rec, cursor = backlog[0]
            try:
                self._execute(g, rec, cursor, rep, now)
            except DDSError as e:
                if e.status is Status.BACKPRESSURE:
                    return
                raise
            backlog.popleft()
            rep.requests += 1
            g.requests += 1

    def _execute(self, g: GroupState, rec: memoryview, cursor: int, rep: StepReport, now: float) -> None:
        rid, op, fid, off, length, _total = REQUEST_HEADER.unpack_from(rec, 0)
        rb = g.responses
        if op in READ_KINDS:
            try:
                spans = self.translate(fid, off, length)
            except DDSError as e:
                slot = rb.preallocate(rid, op, 0, file_id=fid, offset=off, req_cursor=cursor)
                rb.set_status(slot, e.status)
                return
            slot = rb.preallocate(rid, op, length, file_id=fid, offset=off, req_cursor=cursor)
            if not length:
                rb.set_status(slot, Status.SUCCESS)
                return
            self._submit_read(rb, slot, spans, now)
            rep.submissions += 1
        elif op in WRITE_KINDS and op != OpKind.MESSAGE:
            # reserve the response first so a full buffer leaves the request untouched
            slot = rb.preallocate(rid, op, 0, file_id=fid, offset=off, req_cursor=cursor,
                                  data_len=length)
            payload = rec[REQUEST_HEADER_SIZE:REQUEST_HEADER_SIZE + length]
            slot.view = payload
            try:
                spans = self.translate(fid, off, length, allocate=True)
            except DDSError as e:
                rb.set_status(slot, e.status)
                return
            if not length:
                rb.set_status(slot, Status.SUCCESS)
                return
            self._submit_write(rb, slot, spans, payload, now)
            rep.submissions += 1
        else:
            slot = rb.preallocate(rid, op, 0, req_cursor=cursor)
            rb.set_status(slot, Status.BAD_OP_KIND)

    def _submit_read(self, rb: ResponseBuffer, slot: Slot, spans: list[Span], now: float) -> None:
        dest = slot.view
        if self.copy_mode:
            staging = memoryview(bytearray(len(dest)))
            target = staging

            def done(status, slot=slot, staging=staging):
                if status == Status.SUCCESS:
                    accounting.copy_into(DEVICE_TO_HOST, slot.view, staging)
                rb.set_status(slot, status)
        else:
            target = dest

            def done(status, slot=slot):
                rb.set_status(slot, status)
        self.device.submit(READ, _carve(spans, target), done, now, DEVICE_TO_HOST)

    def _submit_write(self, rb: ResponseBuffer, slot: Slot, spans: list[Span], payload, now: float) -> None:
        if self.copy_mode:
            staging = bytearray(len(payload))
            accounting.copy_into(HOST_WRITE, staging, payload)
            payload = memoryview(staging)

        def done(status, slot=slot):
            rb.set_status(slot, status)
        self.device.submit(WRITE, _carve(spans, payload), done, now, HOST_WRITE)

    def submit_read(self, file_id: int, offset: int, length: int, dest: memoryview,
                    callback: Callable[[Status], None], path: str = ENGINE_READ) -> None:
        """Read a file range straight into ``dest`` (used by the offload engine)."""
        try:
            spans = self.translate(file_id, offset, length)
        except DDSError as e:
            callback(e.status)
            return
        self.device.submit(READ, _carve(spans, dest), callback, self.clock(), path)

    def scan_completions(self, g: GroupState, now: Optional[float] = None) -> int:
        if now is None:
            now = self.clock()
        hook = self._run_hooks if self.plugin is not None else None
        return g.responses.scan(hook, now)

    def _run_hooks(self, slot: Slot, status: int) -> None:
        if status != Status.SUCCESS:
            return
        plugin, table = self.plugin, self.table
        if slot.op in WRITE_KINDS:
            keys, items = plugin.cache(WriteOp(slot.file_id, slot.offset, slot.view))
            for k, item in zip(keys, items):
                if table.insert(k, item) is Status.TABLE_FULL:
                    self.hook_stats["table_full"] += 1
                else:
                    self.hook_stats["cache_inserts"] += 1
        elif slot.op in READ_KINDS:
            for k in plugin.invalidate(ReadOp(slot.file_id, slot.offset, slot.length, slot.view)):
                if table.delete(k) is Status.SUCCESS:
                    self.hook_stats["cache_deletes"] += 1

    def deliver_responses(self, g: GroupState, now: Optional[float] = None,
                          batch_threshold: Optional[int] = None) -> int:
        """Write ``[tail_c, tail_b)`` to the host response ring once the batch threshold
        (or the flush deadline) is reached.  Returns bytes delivered."""
        rb = g.responses
        pending = rb.tail_b - rb.tail_c
        if pending <= 0:
            return 0
        if now is None:
            now = self.clock()
        threshold = self.batch_threshold if batch_threshold is None else batch_threshold
        if pending < threshold:
            since = rb.buffered_since
            if since is None or now - since < self.flush_deadline:
                return 0
        if g.response_ring.free_space() < pending:
            return 0
        g.response_ring.dma_deliver(g.channel, rb.deliverable_spans(), rb.tail_c, DEVICE_TO_HOST)
        rb.mark_delivered()
        return pending

    def busy(self) -> bool:
        for g in self.groups:
            rb = g.responses
            if g.backlog or rb.tail_a != rb.tail_c:
                return True
            ring = g.request_ring
            if ring.cells.load(ring.TAIL) != ring.cells.load(ring.HEAD):
                return True
        return False

    def next_flush(self) -> Optional[float]:
        """Earliest time a buffered-but-undelivered batch hits its flush deadline."""
        times = [g.responses.buffered_since + self.flush_deadline
                 for g in self.groups if g.responses.buffered_since is not None]
        return min(times) if times else None

    # -- metadata ---------------------------------------------------------------

    def _meta_base(self) -> int:
        return METADATA_SEGMENT * self.segment_size

    def _copy_area(self, which: int) -> tuple[int, int]:
        half = self.segment_size // 2
        start = self._meta_base() + (self.block_size if which == 0 else half)
        end = self._meta_base() + (half if which == 0 else self.segment_size)
        return start, end - start

    def metadata_image(self) -> bytes:
        dirs = sorted(self.dirs.items())
        files = sorted(self.files.values(), key=lambda f: f.file_id)
        segrefs: list[int] = []
        parts = [_IMG_HEAD.pack(_IMG_MAGIC, META_VERSION, self.segment_size, self.block_size,
                                self.alloc.total, len(dirs), len(files),
                                sum(len(f.segments) for f in files), self._next_dir,
                                self._next_file)]
        for did, name in dirs:
            parts.append(_DIR_REC.pack(did, name.encode()))
        for f in files:
            parts.append(_FILE_REC.pack(f.file_id, f.dir_id, f.name.encode(), f.size,
                                        len(f.segments), len(segrefs)))
            segrefs.extend(f.segments)
        parts.append(struct.pack(f"<{len(segrefs)}I", *segrefs))
        parts.append(bytes(self.alloc.bitmap))
        return b"".join(parts)

    def persist_metadata(self) -> None:
        """Write the metadata image to the inactive copy, then flip the superblock."""
        image = self.metadata_image()
        dev = self.device
        base = self._meta_base()
        active, generation = 1, 0
        try:
            magic, ver, active, generation, _ = _SUPER.unpack(dev.read_sync(base, _SUPER.size))
            if magic != _META_MAGIC:
                active, generation = 1, 0
        except struct.error:
            pass
        target = 1 - active if active in (0, 1) else 0
        start, room = self._copy_area(target)
        if len(image) > room:
            raise DDSError(Status.NO_SPACE, f"metadata image {len(image)} > {room}")
        dev.write_sync(start, image)
        sb = bytearray(self.block_size)
        _SUPER.pack_into(sb, 0, _META_MAGIC, META_VERSION, target, generation + 1, len(image))
        dev.write_sync(base, sb)

    def load_metadata(self) -> None:
        """Rebuild directories, files and the bitmap from the device."""
        dev = self.device
        base = self._meta_base()
        magic, ver, active, _gen, length = _SUPER.unpack(dev.read_sync(base, _SUPER.size))
        if magic != _META_MAGIC or ver != META_VERSION or active not in (0, 1):
            raise DDSError(Status.CORRUPT_METADATA, "bad superblock")
        start, room = self._copy_area(active)
        if length > room or length < _IMG_HEAD.size:
            raise DDSError(Status.CORRUPT_METADATA, "bad image length")
        img = dev.read_sync(start, length)
        (magic, ver, seg_size, block_size, total, ndirs, nfiles, nrefs,
         next_dir, next_file) = _IMG_HEAD.unpack_from(img, 0)
        if magic != _IMG_MAGIC or ver != META_VERSION:
            raise DDSError(Status.CORRUPT_METADATA, "bad image header")
        if seg_size != self.segment_size or block_size != self.block_size or total != self.alloc.total:
            raise DDSError(Status.CORRUPT_METADATA, "geometry mismatch")
        pos = _IMG_HEAD.size
        dirs, files = {}, []
        try:
            for _ in range(ndirs):
                did, name = _DIR_REC.unpack_from(img, pos)
                dirs[did] = name.rstrip(b"\0").decode()
                pos += _DIR_REC.size
            for _ in range(nfiles):
                files.append(_FILE_REC.unpack_from(img, pos))
                pos += _FILE_REC.size
            refs = struct.unpack_from(f"<{nrefs}I", img, pos)
            pos += 4 * nrefs
            bitmap = img[pos:pos + len(self.alloc.bitmap)]
        except struct.error as e:
            raise DDSError(Status.CORRUPT_METADATA, str(e)) from None
        alloc = SegmentAllocator(total)
        alloc.load(bitmap)
        self.alloc = alloc
        self.dirs = dirs
        self._dir_names = {n: d for d, n in dirs.items()}
        self.files = {}
        self._file_names = {}
        for fid, did, name, size, count, first in files:
            fm = FileMapping(fid, did, name.rstrip(b"\0").decode(), size, list(refs[first:first + count]))
            self.files[fid] = fm
            self._file_names[(did, fm.name)] = fid
        self._next_dir = next_dir
        self._next_file = next_file

    def describe(self) -> dict:
        """Plain-data dump of the metadata (used by ``fsck``)."""
        return {
            "segment_size": self.segment_size,
            "block_size": self.block_size,
            "segments": self.alloc.total,
            "segments_used": self.alloc.used,
            "segments_free": self.alloc.free_count,
            "directories": [{"id": d, "name": n} for d, n in sorted(self.dirs.items())],
            "files": [{"id": f.file_id, "dir": f.dir_id, "name": f.name, "size": f.size,
                       "segments": list(f.segments)}
                      for f in sorted(self.files.values(), key=lambda f: f.file_id)],
        }


def _check_name(name: str) -> None:
    raw = name.encode()
    if not raw or len(raw) > NAME_LEN or b"\0" in raw:
        raise ValueError(f"names are 1..{NAME_LEN} bytes without NUL")


def _carve(spans: list[Span], view) -> list[tuple[int, memoryview]]:
    """Pair each device span with the matching slice of a contiguous buffer."""
    out = []
    at = 0
    for s in spans:
        out.append((s.device_offset, view[at:at + s.length]))
        at += s.length
    return out
