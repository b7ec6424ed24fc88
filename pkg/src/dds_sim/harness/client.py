"""Closed-loop clients and the request generators they draw from."""
from __future__ import annotations

import hashlib
import random
from typing import Optional

from dds_sim.errors import Status
from dds_sim.plugins import kv_log, page_lsn
from dds_sim.simnet import SimClock, StreamEndpoint
from dds_sim.wire import ResponseReassembler, encode_app_request, encode_message, parse_app_response

KEY_FORMAT = b"k%07d"         # 8-byte keys: a GET message is exactly 32 bytes on the wire
WIDE_KEY = b"fig11-key-12"


def payload_digest(data) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


class _KeyPicker:
    def __init__(self, n: int, skew: float, rng: random.Random) -> None:
        self.n = n
        self.rng = rng
        self._cum = None
        if skew > 0:
            weights = [1.0 / (i + 1) ** skew for i in range(n)]
            total = 0.0
            self._cum = []
            for w in weights:
                total += w
                self._cum.append(total)

    def pick(self) -> int:
        if self._cum is None:
            return self.rng.randrange(self.n)
        return self.rng.choices(range(self.n), cum_weights=self._cum)[0]


class KVWorkload:
    """Uniform (or Zipf) GET/PUT mix over a fixed key space."""

    def __init__(self, keys: int, read_fraction: float, record_size: int, seed,
                 skew: float = 0.0) -> None:
        self.rng = random.Random(seed)
        self.keys = kv_keys(keys)
        self.read_fraction = read_fraction
        self.value_size = record_size - kv_log.RECORD_HEADER.size - len(self.keys[0])
        self.record_size = record_size
        self._picker = _KeyPicker(keys, skew, self.rng)

    def next_request(self) -> tuple[int, bytes, tuple]:
        key = self.keys[self._picker.pick()]
        if self.rng.random() < self.read_fraction:
            return kv_log.OP_GET, key, ("get", key)
        value = self.rng.randbytes(self.value_size)
        return kv_log.OP_PUT, kv_log.put_body(key, value), ("put", key)

    def on_response(self, meta: tuple, status: int) -> None:
        pass


def kv_keys(n: int) -> list[bytes]:
    return [KEY_FORMAT % i for i in range(n)]


def kv_preload(keys: int, record_size: int, seed) -> list[tuple[bytes, bytes]]:
    """Initial value of every key, plus the wide key the literal preamble reads."""
    rng = random.Random(f"preload-{seed}")
    vs = record_size - kv_log.RECORD_HEADER.size
    return [(k, rng.randbytes(vs - len(k))) for k in kv_keys(keys) + [WIDE_KEY]]


class PageLog:
    """LSN state shared by every page client: the next LSN to hand out and,
    per page, the newest LSN whose apply has been acknowledged."""

    def __init__(self, pages: int) -> None:
        self.acked = [1] * pages
        self.lsn = 1


class PageWorkload:
    """GetPage@LSN reads and LSN-advancing applies over a page range.

    Reads ask for the newest LSN whose apply the client has seen acknowledged.
    """

    def __init__(self, log: PageLog, read_fraction: float, seed, skew: float = 0.0) -> None:
        self.rng = random.Random(seed)
        self.log = log
        self.read_fraction = read_fraction
        self._picker = _KeyPicker(len(log.acked), skew, self.rng)

    def next_request(self) -> tuple[int, bytes, tuple]:
        pid = self._picker.pick()
        log = self.log
        if self.rng.random() < self.read_fraction:
            lsn = log.acked[pid]
            return page_lsn.OP_GETPAGE, page_lsn.BODY.pack(pid, lsn), ("getpage", pid, lsn)
        log.lsn += 1
        return page_lsn.OP_APPLY, page_lsn.BODY.pack(pid, log.lsn), ("apply", pid, log.lsn)

    def on_response(self, meta: tuple, status: int) -> None:
        acked = self.log.acked
        if meta[0] == "apply" and status == Status.SUCCESS and meta[2] > acked[meta[1]]:
            acked[meta[1]] = meta[2]


class Results:
    """Per-run response bookkeeping shared by every client."""

    def __init__(self, keep_log: bool = False) -> None:
        self.latencies: list[float] = []
        self.digests: dict[int, bytes] = {}
        self.statuses: dict[int, int] = {}
        self.log: Optional[list] = [] if keep_log else None
        self.duplicates = 0
        self.first_send: Optional[float] = None
        self.last_completion = 0.0
        self.issued = 0


class Client:
    """Keeps ``outstanding`` messages of ``per_message`` requests in flight."""

    def __init__(self, clock: SimClock, conn_id: int, endpoint: StreamEndpoint, workload,
                 results: Results, *, ops: int, per_message: int, outstanding: int) -> None:
        self.clock = clock
        self.conn_id = conn_id
        self.endpoint = endpoint
        self.workload = workload
        self.results = results
        self.remaining = ops
        self.per_message = per_message
        self.outstanding = outstanding
        self.inflight_messages = 0
        self._next = 0
        self._pending: dict[int, tuple] = {}       # rid -> (sent at, message id, meta)
        self._left: dict[int, int] = {}            # message id -> responses outstanding
        self._msg_ids = 0
        self._responses = ResponseReassembler()
        endpoint.on_data = self._on_data

    def _rid(self) -> int:
        self._next += 1
        return (self.conn_id << 40) | self._next

    def start(self, preamble: Optional[list] = None) -> None:
        for reqs in preamble or []:
            self._send(reqs)
        for _ in range(self.outstanding):
            if not self._send_next():
                break

    def _send_next(self) -> bool:
        n = min(self.per_message, self.remaining)
        if n <= 0:
            return False
        self._send([self.workload.next_request() for _ in range(n)])
        return True

    def _send(self, reqs: list) -> None:
        """``reqs`` is a list of ``(op, body, meta)``."""
        now = self.clock.now
        res = self.results
        if res.first_send is None:
            res.first_send = now
        mid = self._msg_ids
        self._msg_ids += 1
        raws = []
        for op, body, meta in reqs:
            rid = self._rid()
            self._pending[rid] = (now, mid, meta)
            raws.append(encode_app_request(op, rid, body))
            if res.log is not None:
                res.log.append((rid, meta))
        self._left[mid] = len(reqs)
        self.remaining -= len(reqs)
        res.issued += len(reqs)
        self.inflight_messages += 1
        self.endpoint.send(encode_message(raws))

    def _on_data(self, data) -> None:
        res = self.results
        now = self.clock.now
        for record in self._responses.feed(data):
            rid, status, payload = parse_app_response(record)
            p = self._pending.pop(rid, None)
            if p is None:
                res.duplicates += 1
                continue
            sent, mid, meta = p
            res.latencies.append(now - sent)
            res.statuses[rid] = status
            res.digests[rid] = payload_digest(payload)
            res.last_completion = now
            self.workload.on_response(meta, status)
            self._left[mid] -= 1
            if not self._left[mid]:
                del self._left[mid]
                self.inflight_messages -= 1
                self._send_next()

    @property
    def pending(self) -> int:
        return len(self._pending)


def literal_preamble(keys: list) -> list:
    """Four messages that put a fully offloadable message in the middle of a
    stream: a 32 B host GET, a 900 B DPU-only message, a 32 B DPU-only GET
    and another 32 B host GET.  With ISN 100 they start at 100, 132, 1032, 1064.

    The host-bound GETs use a key outside the preloaded space.
    """
    miss = b"m%07d" % 0
    cached = keys
    get = kv_log.OP_GET
    big = [(get, cached[i % len(cached)], ("get", cached[i % len(cached)])) for i in range(36)]
    big.append((get, WIDE_KEY, ("get", WIDE_KEY)))
    return [[(get, miss, ("get", miss))], big,
            [(get, cached[0], ("get", cached[0]))],
            [(get, miss, ("get", miss))]]
