"""Simulated NVMe-style block device with asynchronous, reorderable completions."""
from __future__ import annotations

import heapq
import itertools
import random
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

from dds_sim.accounting import moved
from dds_sim.errors import DDSError, Status

READ = "read"
WRITE = "write"


@dataclass
class Submission:
    kind: str
    spans: Sequence[tuple[int, memoryview]]   # (device byte offset, host-side view)
    callback: Optional[Callable[[Status], None]]
    path: str
    due: float
    seq: int


class BlockDevice:
    """Byte-addressed media behind a block interface.

    ``submit`` queues an I/O; it completes when :meth:`tick` is called with a
    time at or past its due time.  Each submission draws a latency uniformly
    from ``latency`` so completions may arrive out of submission order.  Data
    moves only at completion: writes read their source view then, reads fill
    their destination view then.
    """

    def __init__(self, capacity: int, block_size: int = 512,
                 latency: tuple[float, float] = (10.0, 10.0), seed: int = 0,
                 fail_rate: float = 0.0, media: Optional[bytearray] = None) -> None:
        if capacity % block_size:
            raise ValueError("capacity must be a multiple of block_size")
        self.capacity = capacity
        self.block_size = block_size
        self.latency = latency
        self.fail_rate = fail_rate
        self.rng = random.Random(seed)
        if media is None:
            media = bytearray(capacity)
        elif len(media) != capacity:
            raise ValueError("media length does not match capacity")
        self.media = media
        self._mv = memoryview(self.media)
        self._heap: list = []
        self._seq = itertools.count()
        self._lock = threading.Lock()
        self.submitted = 0
        self.completed = 0
        self.on_submit: Optional[Callable[[float], None]] = None

    @property
    def blocks(self) -> int:
        return self.capacity // self.block_size

    def submit(self, kind: str, spans: Sequence[tuple[int, memoryview]],
               callback: Optional[Callable[[Status], None]], now: float,
               path: str = "device") -> float:
        """Queue one I/O over ``spans``; returns its due time."""
        for off, view in spans:
            if off < 0 or off + len(view) > self.capacity:
                raise DDSError(Status.OUT_OF_RANGE, f"device range {off}+{len(view)}")
        lo, hi = self.latency
        due = now + (lo if lo == hi else self.rng.uniform(lo, hi))
        with self._lock:
            seq = next(self._seq)
            heapq.heappush(self._heap, (due, seq, Submission(kind, spans, callback, path, due, seq)))
            self.submitted += 1
        if self.on_submit is not None:
            self.on_submit(due)
        return due

    def next_due(self) -> Optional[float]:
        with self._lock:
            return self._heap[0][0] if self._heap else None

    def outstanding(self) -> int:
        with self._lock:
            return len(self._heap)

    def tick(self, now: float) -> int:
        """Complete every submission due at or before ``now``; returns how many."""
        done = []
        with self._lock:
            heap = self._heap
            while heap and heap[0][0] <= now:
                done.append(heapq.heappop(heap)[2])
        for sub in done:
            self._complete(sub)
        return len(done)

    def _complete(self, sub: Submission) -> None:
        status = Status.SUCCESS
        if self.fail_rate and self.rng.random() < self.fail_rate:
            status = Status.IO_ERROR
        else:
            mv = self._mv
            n = 0
            if sub.kind == WRITE:
                for off, view in sub.spans:
                    k = len(view)
                    mv[off:off + k] = view
                    n += k
            else:
                for off, view in sub.spans:
                    k = len(view)
                    view[:] = mv[off:off + k]
                    n += k
            moved(sub.path, "device", n)
        self.completed += 1
        if sub.callback is not None:
            sub.callback(status)

    def drain(self) -> int:
        """Complete everything outstanding regardless of due time."""
        return self.tick(float("inf"))

    # synchronous access for the control plane (metadata)

    def read_sync(self, offset: int, n: int) -> bytes:
        if offset < 0 or offset + n > self.capacity:
            raise DDSError(Status.OUT_OF_RANGE, f"device range {offset}+{n}")
        moved("metadata", "device", n)
        return bytes(self._mv[offset:offset + n])

    def write_sync(self, offset: int, data) -> None:
        n = len(data)
        if offset < 0 or offset + n > self.capacity:
            raise DDSError(Status.OUT_OF_RANGE, f"device range {offset}+{n}")
        self._mv[offset:offset + n] = data
        moved("metadata", "device", n)

    # image files

    def save_image(self, path) -> None:
        Path(path).write_bytes(self.media)

    @classmethod
    def from_image(cls, path, block_size: int = 512, **kw) -> "BlockDevice":
        data = bytearray(Path(path).read_bytes())
        return cls(len(data), block_size, media=data, **kw)
