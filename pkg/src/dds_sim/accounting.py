"""Path-attributed payload movement counters.

Every place payload bytes move goes through :func:`moved`.  ``kind`` says what
moved them:

``inline``  the producer placing its payload into a ring reservation
``dma``     the modeled host<->DPU DMA channel
``device``  the block device transferring to or from its media
``wire``    the network link handing a segment to the receiver
``copy``    any other memcpy; zero-copy paths must never record one
"""
from __future__ import annotations

import threading
from collections import Counter
from contextlib import contextmanager

KINDS = ("inline", "dma", "device", "wire", "copy")


class MovementCounter:
    def __init__(self) -> None:
        self.events: Counter = Counter()
        self.nbytes: Counter = Counter()
        self._lock = threading.Lock()

    def record(self, path: str, kind: str, n: int) -> None:
        key = (path, kind)
        with self._lock:
            self.events[key] += 1
            self.nbytes[key] += n

    def copies(self, path: str | None = None) -> int:
        return sum(v for (p, k), v in self.events.items()
                   if k == "copy" and (path is None or p == path))

    def count(self, path: str, kind: str) -> int:
        return self.events[(path, kind)]

    def by_path(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for (p, k), v in sorted(self.events.items()):
            out.setdefault(p, {})[k] = v
        return out

    def reset(self) -> None:
        with self._lock:
            self.events.clear()
            self.nbytes.clear()


MOVES = MovementCounter()

# Path names used by the audited datapaths.
HOST_WRITE = "host_write_to_device"
DEVICE_TO_HOST = "device_to_host_response"
ENGINE_READ = "device_to_engine_packet"
HOST_DRAIN = "host_response_drain"


def moved(path: str, kind: str, n: int) -> None:
    MOVES.record(path, kind, n)


def copy_into(path: str, dst, src) -> None:
    """An explicit payload copy, always counted against ``path``."""
    n = len(src)
    dst[:n] = src
    MOVES.record(path, "copy", n)


@contextmanager
def fresh_counter():
    MOVES.reset()
    yield MOVES
