"""64-bit atomic cells over a shared byte region.

The compiled ``_atomics`` extension is used when it was built; otherwise a
lock-backed stand-in with the same interface is returned.  Only the compiled
version is lock-free.
"""
from __future__ import annotations

import struct
import threading
import time

try:
    from dds_sim._atomics import Cells as _NativeCells
    from dds_sim._atomics import spin_nogil as _spin_nogil
except ImportError:  # pragma: no cover - exercised only without a C compiler
    _NativeCells = None
    _spin_nogil = None

NATIVE = _NativeCells is not None

_U64 = struct.Struct("<Q")
_MASK = (1 << 64) - 1


class _LockedCells:
    def __init__(self, buf) -> None:
        self._mv = memoryview(buf).cast("B")
        self._lock = threading.Lock()

    def load(self, off: int) -> int:
        return _U64.unpack_from(self._mv, off)[0]

    def load_pair(self, first: int, second: int) -> tuple[int, int]:
        return _U64.unpack_from(self._mv, first)[0], _U64.unpack_from(self._mv, second)[0]

    def store(self, off: int, value: int) -> None:
        _U64.pack_into(self._mv, off, value)

    def cas(self, off: int, expected: int, desired: int) -> bool:
        with self._lock:
            if _U64.unpack_from(self._mv, off)[0] != expected:
                return False
            _U64.pack_into(self._mv, off, desired)
            return True

    def fetch_add(self, off: int, delta: int) -> int:
        with self._lock:
            old = _U64.unpack_from(self._mv, off)[0]
            _U64.pack_into(self._mv, off, (old + delta) & _MASK)
            return old


def cells(buf):
    """Atomic view over ``buf`` (a writable, 8-byte aligned buffer)."""
    if NATIVE:
        return _NativeCells(buf)
    return _LockedCells(buf)


def spin(ns: int) -> None:
    """Busy-wait ``ns`` nanoseconds while letting other threads run."""
    if _spin_nogil is not None:
        _spin_nogil(ns)
        return
    end = time.perf_counter_ns() + ns
    while time.perf_counter_ns() < end:
        time.sleep(0)
