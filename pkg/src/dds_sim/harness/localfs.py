"""In-memory file backend for runs with offloading disabled.

It exposes the same calls a host app makes on the file library, but keeps
file contents in host memory and completes every I/O after a fixed
simulated latency.  Payloads are copied on the way in and out, which is
what a conventional kernel file path does.
"""
from __future__ import annotations

import itertools
from collections import deque
from typing import Callable, Optional

from dds_sim.accounting import copy_into
from dds_sim.errors import DDSError, Status
from dds_sim.hostlib import Completion, FileHandle

BASELINE_PATH = "baseline_file_io"


class LocalGroup:
    def __init__(self, group_id: int) -> None:
        self.group_id = group_id
        self.ready: deque = deque()
        self.issued = 0
        self.completed = 0
        self.inflight = 0

    def __len__(self) -> int:
        return self.inflight


class LocalFileBackend:
    def __init__(self, clock, latency: float = 20.0) -> None:
        self.clock = clock
        self.latency = latency
        self.on_ready: Optional[Callable[[], None]] = None
        self._dirs: dict[str, int] = {}
        self._files: dict[tuple[int, str], int] = {}
        self._data: dict[int, bytearray] = {}
        self._ids = itertools.count(1)
        self.groups: list[LocalGroup] = []

    def create_directory(self, name: str) -> int:
        if name in self._dirs:
            raise DDSError(Status.NAME_EXISTS, name)
        self._dirs[name] = len(self._dirs) + 1
        return self._dirs[name]

    def create_file(self, dir_id: int, name: str) -> FileHandle:
        if (dir_id, name) in self._files:
            raise DDSError(Status.NAME_EXISTS, name)
        fid = len(self._files) + 1
        self._files[(dir_id, name)] = fid
        self._data[fid] = bytearray()
        return FileHandle(fid, name)

    def create_poll(self) -> LocalGroup:
        g = LocalGroup(len(self.groups))
        self.groups.append(g)
        return g

    def poll_add(self, group: LocalGroup, handle: FileHandle) -> Status:
        if handle.group is not None and handle.group is not group:
            raise DDSError(Status.NAME_EXISTS, f"file {handle.file_id} already in a group")
        handle.group = group
        return Status.SUCCESS

    def _group(self, handle: FileHandle) -> LocalGroup:
        if handle.group is None:
            raise DDSError(Status.NOT_IN_GROUP, f"file {handle.file_id} has no poll group")
        return handle.group

    def _finish(self, g: LocalGroup, c: Completion) -> None:
        g.inflight -= 1
        g.ready.append(c)
        if self.on_ready is not None:
            self.on_ready()

    def read_file(self, handle: FileHandle, offset: int, length: int, destination) -> int:
        g = self._group(handle)
        rid = next(self._ids)
        g.issued += 1
        g.inflight += 1

        def done():
            data = self._data[handle.file_id]
            if offset + length > len(data):
                self._finish(g, Completion(rid, Status.OUT_OF_RANGE, 0))
                return
            copy_into(BASELINE_PATH, memoryview(destination), memoryview(data)[offset:offset + length])
            self._finish(g, Completion(rid, Status.SUCCESS, length))
        self.clock.after(self.latency, done)
        return rid

    def write_file(self, handle: FileHandle, offset: int, source) -> int:
        g = self._group(handle)
        rid = next(self._ids)
        g.issued += 1
        g.inflight += 1
        staged = bytearray(len(source))
        copy_into(BASELINE_PATH, staged, source)

        def done():
            data = self._data[handle.file_id]
            end = offset + len(staged)
            if end > len(data):
                data.extend(bytes(end - len(data)))
            data[offset:end] = staged
            handle.size = max(handle.size, end)
            self._finish(g, Completion(rid, Status.SUCCESS, 0))
        self.clock.after(self.latency, done)
        return rid

    def poll_wait(self, group: LocalGroup, max_completions: Optional[int] = None,
                  timeout: float = 0.0) -> list[Completion]:
        out = []
        ready = group.ready
        while ready and (max_completions is None or len(out) < max_completions):
            out.append(ready.popleft())
        group.completed += len(out)
        return out
