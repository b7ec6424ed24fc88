"""Deterministic discrete-event clock and a minimal reliable byte stream.

Time is in microseconds.  Events with equal times fire in scheduling order.
Endpoints send MSS-sized segments with cumulative ACKs; an out-of-order
segment makes the receiver re-ACK the next expected byte at once, three such
duplicate ACKs make the sender resend everything from the first
unacknowledged byte, and a retransmission timer covers losses at the tail.
There is no congestion window.
"""
from __future__ import annotations

import csv
import hashlib
import heapq
import itertools
import random
from collections import deque
from typing import Callable, Iterable, Optional

from dds_sim.wire import FiveTuple

DEFAULT_MTU = 1500
DEFAULT_LINK_LATENCY = 5.0
DEFAULT_RTO = 1000.0
DUP_ACK_THRESHOLD = 3


class Tracer:
    """Hashes every trace row; keeps rows only when asked to."""

    def __init__(self, keep: bool = False, transport: bool = False) -> None:
        self.keep = keep
        self.transport = transport      # per-segment rows
        self.rows: list[tuple] = []
        self._hash = hashlib.blake2b(digest_size=16)
        self.count = 0

    def __call__(self, time: float, component: str, event: str, detail: str = "") -> None:
        self._hash.update(f"{time:.4f}|{component}|{event}|{detail}\n".encode())
        self.count += 1
        if self.keep:
            self.rows.append((round(time, 4), component, event, detail))

    def hexdigest(self) -> str:
        return self._hash.hexdigest()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(("time", "component", "event", "detail"))
            w.writerows(self.rows)


class SimClock:
    def __init__(self, tracer: Optional[Tracer] = None) -> None:
        self.now = 0.0
        self._heap: list = []
        self._seq = itertools.count()
        self.trace = tracer or Tracer()
        self.events = 0

    def at(self, when: float, fn: Callable, *args) -> None:
        if when < self.now:
            when = self.now
        heapq.heappush(self._heap, (when, next(self._seq), fn, args))

    def after(self, delay: float, fn: Callable, *args) -> None:
        heapq.heappush(self._heap, (self.now + delay, next(self._seq), fn, args))

    def pending(self) -> int:
        return len(self._heap)

    def next_time(self) -> Optional[float]:
        return self._heap[0][0] if self._heap else None

    def run(self, until: Optional[float] = None, max_events: Optional[int] = None) -> int:
        """Fire events in time order; stop when idle, past ``until`` or after ``max_events``."""
        heap = self._heap
        pop = heapq.heappop
        n = 0
        while heap:
            if until is not None and heap[0][0] > until:
                self.now = until
                break
            if max_events is not None and n >= max_events:
                break
            when, _, fn, args = pop(heap)
            self.now = when
            fn(*args)
            n += 1
        self.events += n
        return n

    def run_until_idle(self) -> int:
        return self.run()

    def __call__(self) -> float:
        return self.now


class Segment:
    __slots__ = ("flow", "seq", "ack", "data", "header", "retransmit")

    def __init__(self, flow: FiveTuple, seq: int, ack: Optional[int], data=b"",
                 header: Optional[bytearray] = None, retransmit: bool = False) -> None:
        self.flow = flow
        self.seq = seq
        self.ack = ack
        self.data = data
        self.header = header
        self.retransmit = retransmit

    @property
    def end(self) -> int:
        return self.seq + len(self.data)

    def __repr__(self) -> str:
        return f"Segment(seq={self.seq}, len={len(self.data)}, ack={self.ack})"


class Link:
    """One-way wire: delivers each train after ``latency``, dropping segments
    by ``loss`` probability or by the ``drop`` predicate."""

    def __init__(self, clock: SimClock, deliver: Callable[[list], None],
                 latency: float = DEFAULT_LINK_LATENCY, loss: float = 0.0,
                 rng: Optional[random.Random] = None,
                 drop: Optional[Callable[[Segment], bool]] = None, name: str = "link") -> None:
        self.clock = clock
        self.deliver = deliver
        self.latency = latency
        self.loss = loss
        self.rng = rng or random.Random(0)
        self.drop = drop
        self.name = name
        self.sent = 0
        self.dropped = 0

    def send(self, train: list) -> None:
        if self.loss or self.drop is not None:
            kept = []
            for seg in train:
                if (self.drop is not None and self.drop(seg)) or \
                        (self.loss and self.rng.random() < self.loss):
                    self.dropped += 1
                    self.clock.trace(self.clock.now, self.name, "drop", f"seq={seg.seq}")
                    continue
                kept.append(seg)
            train = kept
            if not train:
                return
        self.sent += len(train)
        self.clock.after(self.latency, self.deliver, train)


class _Unacked:
    __slots__ = ("seq", "data", "header", "on_acked")

    def __init__(self, seq, data, header=None, on_acked=None):
        self.seq = seq
        self.data = data
        self.header = header
        self.on_acked = on_acked


class StreamEndpoint:
    """One side of a reliable byte stream.

    ``flow`` is the direction this endpoint sends in.  ``out`` transmits a
    list of segments; ``on_data`` receives in-order payload bytes.
    """

    def __init__(self, clock: SimClock, name: str, flow: FiveTuple, isn: int = 0,
                 mss: int = DEFAULT_MTU, out: Optional[Callable[[list], None]] = None,
                 on_data: Optional[Callable[[object], None]] = None, rto: float = DEFAULT_RTO) -> None:
        self.clock = clock
        self.name = name
        self.flow = flow
        self.mss = mss
        self.out = out
        self.on_data = on_data
        self.rto = rto
        self.isn = isn
        self.snd_una = isn
        self.snd_nxt = isn
        self.rcv_nxt = 0
        self._rtx: deque = deque()
        self._ooo: dict[int, object] = {}
        self._dup_count = 0
        self._recovering = False
        self._timer_armed = False
        self.retransmissions = 0
        self.dup_acks = 0               # duplicate ACKs this endpoint emitted
        self.dup_acks_received = 0
        self.fast_retransmits = 0
        self.timeouts = 0
        self.segments_sent = 0
        self.segments_received = 0
        self.bytes_delivered = 0

    def connect(self, peer: "StreamEndpoint") -> None:
        """Skip the handshake: learn the peer's initial sequence number."""
        self.rcv_nxt = peer.isn

    @property
    def in_flight(self) -> int:
        return self.snd_nxt - self.snd_una

    # -- sending ----------------------------------------------------------------

    def send(self, data, on_acked: Optional[Callable[[], None]] = None) -> None:
        """Queue ``data`` and transmit it as one train of MSS-sized segments."""
        n = len(data)
        if not n:
            return
        mv = memoryview(data)
        mss = self.mss
        train = []
        seq = self.snd_nxt
        ack = self.rcv_nxt
        rtx = self._rtx
        flow = self.flow
        for at in range(0, n, mss):
            chunk = mv[at:at + mss]
            last = at + mss >= n
            rtx.append(_Unacked(seq, chunk, None, on_acked if last else None))
            train.append(Segment(flow, seq, ack, chunk))
            seq += len(chunk)
        self.snd_nxt = seq
        self._transmit(train)

    def send_packets(self, packets: Iterable, on_acked: Optional[Callable[[], None]] = None) -> None:
        """Transmit pre-segmented indirect packets, one segment each."""
        train = []
        seq = self.snd_nxt
        ack = self.rcv_nxt
        flow = self.flow
        rtx = self._rtx
        packets = list(packets)
        last = len(packets) - 1
        for i, p in enumerate(packets):
            k = len(p.payload)
            if k > self.mss:
                raise ValueError(f"packet payload {k} exceeds MSS {self.mss}")
            p.populate(flow, seq, ack)
            rtx.append(_Unacked(seq, p.payload, p.header, on_acked if i == last else None))
            train.append(Segment(flow, seq, ack, p.payload, p.header))
            seq += k
        self.snd_nxt = seq
        self._transmit(train)

    def _transmit(self, train: list) -> None:
        self.segments_sent += len(train)
        tr = self.clock.trace
        if tr.transport:
            for s in train:
                tr(self.clock.now, self.name, "tx", f"seq={s.seq} len={len(s.data)}"
                   + (" rtx" if s.retransmit else ""))
        self.out(train)
        if not self._timer_armed and self.snd_nxt > self.snd_una:
            self._timer_armed = True
            self.clock.after(self.rto, self._on_timer, self.snd_una)

    def _resend_from_una(self, reason: str) -> None:
        ack = self.rcv_nxt
        flow = self.flow
        train = [Segment(flow, u.seq, ack, u.data, u.header, True) for u in self._rtx]
        self.retransmissions += len(train)
        self.clock.trace(self.clock.now, self.name, reason,
                         f"from={self.snd_una} segments={len(train)}")
        if train:
            self._transmit(train)

    def _on_timer(self, una_when_armed: int) -> None:
        self._timer_armed = False
        if self.snd_una >= self.snd_nxt:
            return
        if self.snd_una == una_when_armed:
            self.timeouts += 1
            self._resend_from_una("timeout")
        if not self._timer_armed:
            self._timer_armed = True
            self.clock.after(self.rto, self._on_timer, self.snd_una)

    # -- receiving --------------------------------------------------------------

    def receive(self, train: list) -> None:
        """Process one arriving train; ACK once for in-order data, and
        immediately (duplicate ACK) for each out-of-order segment."""
        need_ack = False
        tr = self.clock.trace
        for seg in train:
            self.segments_received += 1
            data = seg.data
            if seg.ack is not None:
                self._on_ack(seg.ack, not data)
            if not data:
                continue
            if tr.transport:
                tr(self.clock.now, self.name, "rx", f"seq={seg.seq} len={len(data)}")
            seq = seg.seq
            nxt = self.rcv_nxt
            if seq == nxt:
                self._deliver(data)
                need_ack = True
            elif seq > nxt:
                self._ooo.setdefault(seq, data)
                self.dup_acks += 1
                tr(self.clock.now, self.name, "dup_ack", f"ack={nxt} on seq={seq}")
                self._send_ack()
            else:
                end = seq + len(data)
                if end > nxt:
                    self._deliver(memoryview(data)[nxt - seq:])
                need_ack = True
        if need_ack:
            self._send_ack()

    def _deliver(self, data) -> None:
        self.rcv_nxt += len(data)
        self.bytes_delivered += len(data)
        self.on_data(data)
        ooo = self._ooo
        while ooo:
            nxt = self.rcv_nxt
            data = ooo.pop(nxt, None)
            if data is None:
                # drop anything now entirely below rcv_nxt, keep partial overlaps
                stale = [s for s in ooo if s < nxt]
                if not stale:
                    break
                for s in stale:
                    d = ooo.pop(s)
                    if s + len(d) > nxt:
                        ooo.setdefault(nxt, memoryview(d)[nxt - s:])
                continue
            self.rcv_nxt += len(data)
            self.bytes_delivered += len(data)
            self.on_data(data)

    def _send_ack(self) -> None:
        self.out([Segment(self.flow, self.snd_nxt, self.rcv_nxt)])

    def _on_ack(self, ack: int, pure: bool) -> None:
        if ack > self.snd_una:
            if ack > self.snd_nxt:
                ack = self.snd_nxt
            self.snd_una = ack
            rtx = self._rtx
            while rtx and rtx[0].seq + len(rtx[0].data) <= ack:
                u = rtx.popleft()
                if u.on_acked is not None:
                    u.on_acked()
            self._dup_count = 0
            self._recovering = False
        elif pure and ack == self.snd_una and self.snd_nxt > self.snd_una:
            self.dup_acks_received += 1
            self._dup_count += 1
            if self._dup_count == DUP_ACK_THRESHOLD and not self._recovering:
                self._recovering = True
                self.fast_retransmits += 1
                self._resend_from_una("fast_retransmit")

    def counters(self) -> dict:
        return {"retransmissions": self.retransmissions, "dup_acks": self.dup_acks,
                "dup_acks_received": self.dup_acks_received,
                "fast_retransmits": self.fast_retransmits, "timeouts": self.timeouts,
                "segments_sent": self.segments_sent,
                "segments_received": self.segments_received}


def pipe(clock: SimClock, a: StreamEndpoint, b: StreamEndpoint,
         latency: float = DEFAULT_LINK_LATENCY, loss: float = 0.0, seed: int = 0,
         drop_ab: Optional[Callable[[Segment], bool]] = None) -> tuple[Link, Link]:
    """Connect two endpoints with a link in each direction."""
    rng = random.Random(seed)
    ab = Link(clock, b.receive, latency, loss, rng, drop_ab, f"{a.name}->{b.name}")
    ba = Link(clock, a.receive, latency, loss, rng, None, f"{b.name}->{a.name}")
    a.out = ab.send
    b.out = ba.send
    a.connect(b)
    b.connect(a)
    return ab, ba
