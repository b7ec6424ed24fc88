"""Host front end: a small file API whose data-plane calls go over the rings.

Control operations (directories, files, poll groups) are synchronous calls
into the file service.  Reads and writes are encoded straight into a poll
group's request ring and return a request id immediately; ``poll_wait``
drains the group's response ring, placing read data in the destination
buffers registered at submission.
"""
from __future__ import annotations

import itertools
import threading
import time
from dataclasses import dataclass
from typing import Optional, Sequence

from dds_sim.accounting import HOST_DRAIN, HOST_WRITE, moved
from dds_sim.errors import DDSError, Status
from dds_sim.fileservice import FileService, GroupState
from dds_sim.ring import (DEFAULT_CAPACITY, OK, DmaChannel, ProgressRing, ResponseRing)
from dds_sim.wire import OpKind, encode_request_into, request_record_size

RETRY_BUDGET = 64


@dataclass(frozen=True)
class Completion:
    request_id: int
    status: Status
    length: int


class FileHandle:
    __slots__ = ("file_id", "group", "size", "name")

    def __init__(self, file_id: int, name: str, size: int = 0) -> None:
        self.file_id = file_id
        self.name = name
        self.size = size
        self.group: Optional[PollGroup] = None

    def __repr__(self) -> str:
        return f"FileHandle({self.file_id}, {self.name!r}, size={self.size})"


class _Pending:
    __slots__ = ("op", "handle", "offset", "length", "dests", "submitted")

    def __init__(self, op, handle, offset, length, dests, submitted):
        self.op = op
        self.handle = handle
        self.offset = offset
        self.length = length
        self.dests = dests
        self.submitted = submitted


class PollGroup:
    """A request/response ring pair plus the table of in-flight requests."""

    def __init__(self, group_id: int, capacity: int, max_progress: Optional[int],
                 channel: DmaChannel) -> None:
        self.group_id = group_id
        self.request_ring = ProgressRing(capacity, max_progress)
        self.response_ring = ResponseRing(capacity)
        self.channel = channel
        self.pending: dict[int, _Pending] = {}
        self._ids = itertools.count(1)
        self._wake = threading.Event()
        self.state: Optional[GroupState] = None
        self.issued = 0
        self.completed = 0

    def next_request_id(self) -> int:
        return next(self._ids)

    def interrupt(self) -> None:
        self._wake.set()

    def __len__(self) -> int:
        return len(self.pending)


class HostFileLib:
    def __init__(self, service: FileService, ring_capacity: int = DEFAULT_CAPACITY,
                 max_progress: Optional[int] = None, retry_budget: int = RETRY_BUDGET,
                 dma_latency: float = 1.0, dma_per_byte: float = 0.01 / 64) -> None:
        self.service = service
        self.ring_capacity = ring_capacity
        self.max_progress = max_progress
        self.retry_budget = retry_budget
        self.dma_latency = dma_latency
        self.dma_per_byte = dma_per_byte
        self.groups: list[PollGroup] = []
        self._control = threading.Lock()

    # -- control plane ---------------------------------------------------------

    def create_directory(self, name: str) -> int:
        with self._control:
            return self.service.create_directory(name)

    def create_file(self, dir_id: int, name: str) -> FileHandle:
        with self._control:
            fid = self.service.create_file(dir_id, name)
        return FileHandle(fid, name)

    def open_file(self, dir_id: int, name: str) -> FileHandle:
        with self._control:
            fid = self.service.find_file(dir_id, name)
            return FileHandle(fid, name, self.service.file_size(fid))

    def create_poll(self) -> PollGroup:
        with self._control:
            ch = DmaChannel(self.dma_latency, self.dma_per_byte)
            g = PollGroup(len(self.groups), self.ring_capacity, self.max_progress, ch)
            ch.interrupt = g.interrupt
            g.state = self.service.register_group(g.request_ring, g.response_ring, ch)
            self.groups.append(g)
            return g

    def poll_add(self, group: PollGroup, handle: FileHandle) -> Status:
        if handle.group is not None and handle.group is not group:
            raise DDSError(Status.NAME_EXISTS, f"file {handle.file_id} already in group "
                                               f"{handle.group.group_id}")
        handle.group = group
        return Status.SUCCESS

    def close(self, handle: FileHandle) -> None:
        handle.group = None

    def persist(self) -> None:
        with self._control:
            self.service.persist_metadata()

    # -- data plane ------------------------------------------------------------

    def _submit(self, handle: FileHandle, op: OpKind, offset: int, length: int,
                sources: Sequence = (), dests: Optional[list] = None) -> int:
        g = handle.group
        if g is None:
            raise DDSError(Status.NOT_IN_GROUP, f"file {handle.file_id} has no poll group")
        rid = g.next_request_id()
        size = request_record_size(op, length)
        fid = handle.file_id

        def fill(view):
            encode_request_into(view, 0, rid, op, fid, offset, length, sources)

        g.pending[rid] = _Pending(op, handle, offset, length, dests, time.perf_counter())
        ring = g.request_ring
        for _ in range(self.retry_budget):
            if ring.insert_with(size, fill) is OK:
                if length and sources:
                    moved(HOST_WRITE, "inline", length)
                g.issued += 1
                return rid
        del g.pending[rid]
        raise DDSError(Status.RING_FULL, f"request ring of group {g.group_id} is full")

    def read_file(self, handle: FileHandle, offset: int, length: int, destination) -> int:
        dest = memoryview(destination)
        if len(dest) < length:
            raise DDSError(Status.LENGTH_MISMATCH, "destination smaller than length")
        return self._submit(handle, OpKind.READ, offset, length, dests=[dest[:length]])

    def write_file(self, handle: FileHandle, offset: int, source) -> int:
        return self._submit(handle, OpKind.WRITE, offset, len(source), sources=(source,))

    def read_file_scatter(self, handle: FileHandle, offset: int, destinations: Sequence) -> int:
        dests = [memoryview(d) for d in destinations]
        return self._submit(handle, OpKind.READ_SCATTER, offset, sum(len(d) for d in dests),
                            dests=dests)

    def write_file_gather(self, handle: FileHandle, offset: int, sources: Sequence) -> int:
        return self._submit(handle, OpKind.WRITE_GATHER, offset, sum(len(s) for s in sources),
                            sources=tuple(sources))

    # -- completions -----------------------------------------------------------

    def poll_wait(self, group: PollGroup, max_completions: Optional[int] = None,
                  timeout: float = 0.0) -> list[Completion]:
        """Drain up to ``max_completions`` responses.

        ``timeout == 0`` returns at once with whatever is ready.  Otherwise
        the caller sleeps until the response interrupt fires (or ``timeout``
        seconds pass) and then drains.
        """
        if timeout < 0:
            raise ValueError("timeout must be >= 0")
        out = self._drain(group, max_completions)
        if out or timeout == 0:
            return out
        deadline = time.monotonic() + timeout
        wake = group._wake
        while True:
            wake.clear()
            out = self._drain(group, max_completions)
            if out:
                return out
            left = deadline - time.monotonic()
            if left <= 0 or not wake.wait(left):
                return self._drain(group, max_completions)

    def _drain(self, group: PollGroup, max_completions: Optional[int]) -> list[Completion]:
        out: list[Completion] = []
        pending = group.pending

        def handle(rid, status, data, length):
            p = pending.pop(rid, None)
            if p is None:
                raise DDSError(Status.NOT_FOUND, f"response for unknown request {rid}")
            st = Status(status)
            if st is Status.SUCCESS:
                if p.dests:
                    at = 0
                    for d in p.dests:
                        k = len(d)
                        d[:] = data[at:at + k]
                        at += k
                    moved(HOST_DRAIN, "copy", at)
                else:
                    end = p.offset + p.length
                    if end > p.handle.size:
                        p.handle.size = end
            out.append(Completion(rid, st, length))

        group.response_ring.consume(handle, max_completions)
        group.completed += len(out)
        return out


class ServiceRunner:
    """Drives a file service in real time with two threads: the fetch/deliver
    loop and the device-completion dispatcher.

    Simulated time is wall-clock microseconds since start, so modeled device
    latency becomes a real delay.
    """

    def __init__(self, service: FileService, idle_sleep: float = 20e-6) -> None:
        self.service = service
        self.idle_sleep = idle_sleep
        self._stop_evt = threading.Event()
        self._t0 = time.perf_counter()
        service.clock = self.now
        self._threads = [threading.Thread(target=self._service_loop, daemon=True, name="dpu-dma"),
                         threading.Thread(target=self._completion_loop, daemon=True, name="dpu-io")]

    def now(self) -> float:
        return (time.perf_counter() - self._t0) * 1e6

    def _service_loop(self) -> None:
        svc = self.service
        while not self._stop_evt.is_set():
            if svc.service_loop_step().idle:
                time.sleep(self.idle_sleep)

    def _completion_loop(self) -> None:
        dev = self.service.device
        while not self._stop_evt.is_set():
            if not dev.tick(self.now()):
                time.sleep(self.idle_sleep)

    def start(self) -> None:
        for t in self._threads:
            t.start()

    def stop(self) -> None:
        self._stop_evt.set()
        for t in self._threads:
            t.join()

    def __enter__(self) -> "ServiceRunner":
        self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.stop()
