"""Traffic director: the bump in the wire between clients and the host.

Flows that match no signature are forwarded untouched.  A matching flow is
split: the DPU terminates the client's stream and opens its own stream to
the host, so requests it keeps never leave a hole in the host's sequence
space.  Each client message is run through the plugin's offload predicate;
host-bound requests are re-framed onto the host stream, the rest go to the
offload engine of the flow's core.

``passthrough`` disables splitting (test only): requests the DPU keeps are
simply not forwarded, and the host stream sees the gap.
"""
from __future__ import annotations

import enum
import hashlib
import ipaddress
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from dds_sim.accounting import ENGINE_READ, moved
from dds_sim.errors import DDSError
from dds_sim.simnet import Link, SimClock, StreamEndpoint
from dds_sim.wire import (MESSAGE_HEADER, MESSAGE_HEADER_SIZE, FiveTuple, FlowSignature,
                          MessageReassembler, ResponseReassembler, frame_message,
                          match_signature, split_message)

log = logging.getLogger(__name__)


class Route(enum.Enum):
    FAST_PATH_HOST = "fast_path_host"
    INSPECT = "inspect"


@dataclass(frozen=True)
class Classification:
    route: Route
    core: Optional[int] = None


def rss_core(flow: FiveTuple, cores: int) -> int:
    """Symmetric flow hash: both directions of a connection map to one core."""
    a = f"{flow.src_ip}:{flow.src_port}"
    b = f"{flow.dst_ip}:{flow.dst_port}"
    lo, hi = (a, b) if a <= b else (b, a)
    d = hashlib.blake2b(f"{lo}|{hi}|{flow.proto}".encode(), digest_size=8).digest()
    return int.from_bytes(d, "little") % cores


@dataclass
class DirectorConfig:
    signatures: list = field(default_factory=list)
    cores: int = 4
    mtu: int = 1500
    inspect_cost: float = 2.0
    link_latency: float = 5.0
    host_link_latency: float = 1.0
    rto: float = 1000.0
    isn: int = 1000
    passthrough: bool = False


class OutboundQueue:
    """Serializes host records and engine packet trains onto one client stream."""

    def __init__(self, endpoint: StreamEndpoint) -> None:
        self.endpoint = endpoint
        self.closed = False
        self.dropped = 0
        self._items: deque = deque()

    def push_records(self, records: Sequence[bytes]) -> None:
        self._items.append((0, records, None))
        self._flush()

    def push_packets(self, packets: list, release: Callable[[], None]) -> None:
        self._items.append((1, packets, release))
        self._flush()

    def _flush(self) -> None:
        ep = self.endpoint
        items = self._items
        while items:
            kind, what, release = items.popleft()
            if self.closed:
                self.dropped += 1
                if release is not None:
                    release()
                continue
            if kind == 0:
                ep.send(b"".join(what))
            else:
                ep.send_packets(what, release)


class SplitConnection:
    def __init__(self, conn_id: int, flow: FiveTuple, core: int) -> None:
        self.conn_id = conn_id
        self.flow = flow                  # client -> server
        self.core = core
        self.client_side: Optional[StreamEndpoint] = None
        self.host_side: Optional[StreamEndpoint] = None
        self.requests = MessageReassembler()
        self.responses = ResponseReassembler()
        self.outbound: Optional[OutboundQueue] = None
        self.messages = 0
        self.offloaded = 0
        self.forwarded = 0
        self.passthrough = False
        # passthrough bookkeeping: stream offsets of held segments and messages
        self.pt_next = 0
        self.pt_held: deque = deque()
        self.pt_classified: deque = deque()
        self.pt_stream_end = 0
        self.pt_msg_start = 0

    def __repr__(self) -> str:
        return f"SplitConnection({self.conn_id}, core={self.core})"


class Director:
    """Classifies flows and runs the split/inspect path for matching ones."""

    def __init__(self, clock: SimClock, config: DirectorConfig, plugin=None, table=None,
                 engines: Optional[list] = None) -> None:
        self.clock = clock
        self.config = config
        self.signatures: list[FlowSignature] = list(config.signatures)
        self.plugin = plugin
        self.table = table
        self.engines = engines or []
        self.core_busy = [0.0] * config.cores
        self.busy_time = 0.0
        self.connections: list[SplitConnection] = []
        self.fast_path_packets = 0
        self.inspected_packets = 0
        self.parse_failures = 0
        self.engine_responses_dropped = 0
        self.consumed_segments = 0

    # -- classification -------------------------------------------------------

    def classify(self, flow: FiveTuple) -> Classification:
        """Fast path for non-matching or unparseable flows; otherwise the RSS core."""
        try:
            ipaddress.ip_address(flow.src_ip)
            ipaddress.ip_address(flow.dst_ip)
        except (ValueError, TypeError):
            return Classification(Route.FAST_PATH_HOST)
        for sig in self.signatures:
            if match_signature(sig, flow) or match_signature(sig, flow.reversed()):
                return Classification(Route.INSPECT, rss_core(flow, self.config.cores))
        return Classification(Route.FAST_PATH_HOST)

    def signature_for(self, flow: FiveTuple) -> Optional[FlowSignature]:
        for sig in self.signatures:
            if match_signature(sig, flow):
                return sig
        return None

    # -- connection wiring ----------------------------------------------------

    def connect(self, client: StreamEndpoint, host: StreamEndpoint, rng=None) -> Optional[SplitConnection]:
        """Wire a client endpoint to a host endpoint through the DPU.

        Returns the split connection for inspected flows, ``None`` for the fast path.
        """
        cfg = self.config
        clk = self.clock
        c = self.classify(client.flow)
        if c.route is Route.FAST_PATH_HOST or self.plugin is None:
            to_host = Link(clk, host.receive, cfg.host_link_latency, name="dpu->host")
            to_client = Link(clk, client.receive, cfg.link_latency, name="dpu->client")

            def from_client(train):
                self.fast_path_packets += len(train)
                to_host.send(train)

            def from_host(train):
                self.fast_path_packets += len(train)
                to_client.send(train)
            client.out = Link(clk, from_client, cfg.link_latency, name="client->dpu").send
            host.out = Link(clk, from_host, cfg.host_link_latency, name="host->dpu").send
            client.connect(host)
            host.connect(client)
            return None

        conn = SplitConnection(len(self.connections), client.flow, c.core)
        self.connections.append(conn)
        if cfg.passthrough:
            conn.passthrough = True
            to_host = Link(clk, host.receive, cfg.host_link_latency, name="dpu->host")
            to_client = Link(clk, client.receive, cfg.link_latency, name="dpu->client")
            conn.pt_to_host = to_host
            client.out = Link(clk, lambda t: self._passthrough_from_client(conn, t),
                              cfg.link_latency, name="client->dpu").send
            host.out = Link(clk, to_client.send, cfg.host_link_latency, name="host->dpu").send
            client.connect(host)
            host.connect(client)
            conn.pt_next = client.isn
            return conn

        # full split: two independent streams
        cs = StreamEndpoint(clk, f"dpu-c{conn.conn_id}", client.flow.reversed(), cfg.isn,
                            cfg.mtu, rto=cfg.rto)
        hs = StreamEndpoint(clk, f"dpu-h{conn.conn_id}", client.flow, cfg.isn + 7919,
                            cfg.mtu, rto=cfg.rto)
        cs.on_data = lambda data: self._on_client_bytes(conn, data)
        hs.on_data = lambda data: self._on_host_bytes(conn, data)
        cs.out = Link(clk, client.receive, cfg.link_latency, name="dpu->client").send
        client.out = Link(clk, lambda t: self._inspect(conn, t), cfg.link_latency,
                          name="client->dpu").send
        hs.out = Link(clk, host.receive, cfg.host_link_latency, name="dpu->host").send
        host.out = Link(clk, hs.receive, cfg.host_link_latency, name="host->dpu").send
        client.connect(cs)
        cs.connect(client)
        hs.connect(host)
        host.connect(hs)
        conn.client_side = cs
        conn.host_side = hs
        conn.outbound = OutboundQueue(cs)
        return conn

    def _inspect(self, conn: SplitConnection, train: list) -> None:
        """Charge the per-packet inspection cost on the connection's core."""
        n = sum(1 for s in train if s.data)
        self.inspected_packets += n
        if not n:
            conn.client_side.receive(train)
            return
        cost = n * self.config.inspect_cost
        start = max(self.clock.now, self.core_busy[conn.core])
        self.core_busy[conn.core] = start + cost
        self.busy_time += cost
        self.clock.at(start + cost, conn.client_side.receive, train)

    # -- split path -----------------------------------------------------------

    def _on_client_bytes(self, conn: SplitConnection, data) -> None:
        try:
            messages = conn.requests.feed(data)
        except DDSError:
            self.parse_failures += 1
            conn.host_side.send(bytes(data))
            return
        for count, payload in messages:
            self._on_message(conn, count, payload)

    def _split(self, count: int, payload) -> Optional[list]:
        try:
            reqs = split_message(payload)
        except DDSError:
            return None
        return reqs if len(reqs) == count else None

    def _on_message(self, conn: SplitConnection, count: int, payload) -> None:
        conn.messages += 1
        reqs = self._split(count, payload)
        if reqs is None:
            # fail open: forward the message unchanged
            self.parse_failures += 1
            conn.forwarded += count
            conn.host_side.send(frame_raw(count, payload))
            return
        host, dpu = self.plugin.off_pred(reqs, self.table)
        if host:
            self.send_to_host(conn, host)
        if dpu:
            conn.offloaded += len(dpu)
            self.engines[conn.core].engine_step(conn, dpu)

    def send_to_host(self, conn: SplitConnection, reqs: list) -> None:
        conn.forwarded += len(reqs)
        if conn.passthrough:
            # engine fallbacks in passthrough have no host stream of their own
            self.engine_responses_dropped += len(reqs)
            return
        conn.host_side.send(frame_message([r.raw for r in reqs]))

    def send_to_client(self, conn: SplitConnection, packets: list, release: Callable[[], None]) -> None:
        moved(ENGINE_READ, "wire", sum(len(p.payload) for p in packets))
        if conn.passthrough:
            self.engine_responses_dropped += 1
            release()
            return
        conn.outbound.push_packets(packets, release)

    def _on_host_bytes(self, conn: SplitConnection, data) -> None:
        records = conn.responses.feed(data)
        if records:
            conn.outbound.push_records(records)

    # -- passthrough (no splitting) -------------------------------------------

    def _passthrough_from_client(self, conn: SplitConnection, train: list) -> None:
        out = []
        for seg in train:
            n = len(seg.data)
            if not n or seg.seq < conn.pt_next:
                # ACKs and retransmissions pass straight through
                out.append(seg)
                continue
            if seg.seq > conn.pt_next:
                # a hole upstream: stop classifying, just forward
                out.append(seg)
                continue
            conn.pt_next = seg.seq + n
            conn.pt_held.append((seg, conn.pt_stream_end, conn.pt_stream_end + n))
            conn.pt_stream_end += n
            try:
                messages = conn.requests.feed(seg.data)
            except DDSError:
                self.parse_failures += 1
                messages = []
            for count, payload in messages:
                start = conn.pt_msg_start
                end = start + MESSAGE_HEADER_SIZE + len(payload)
                conn.pt_msg_start = end
                conn.messages += 1
                reqs = self._split(count, payload)
                host, dpu = (None, None) if reqs is None else self.plugin.off_pred(reqs, self.table)
                offload_only = bool(dpu) and not host
                conn.pt_classified.append((start, end, offload_only))
                if offload_only:
                    conn.offloaded += len(dpu)
                    self.engines[conn.core].engine_step(conn, dpu)
                else:
                    conn.forwarded += count
            out.extend(self._release_held(conn))
        self.inspected_packets += len(train)
        if out:
            conn.pt_to_host.send(out)

    def _release_held(self, conn: SplitConnection) -> list:
        classified = conn.pt_classified
        done_upto = classified[-1][1] if classified else 0
        out = []
        held = conn.pt_held
        while held and held[0][2] <= done_upto:
            seg, s, e = held.popleft()
            consumed = True
            for ms, me, only in classified:
                if me <= s:
                    continue
                if ms >= e:
                    break
                if not only:
                    consumed = False
                    break
            if consumed:
                self.consumed_segments += 1
                self.clock.trace(self.clock.now, "director", "consume", f"seq={seg.seq}")
            else:
                out.append(seg)
        keep_from = held[0][1] if held else done_upto
        while classified and classified[0][1] <= keep_from:
            classified.popleft()
        return out


def frame_raw(count: int, payload) -> bytes:
    return MESSAGE_HEADER.pack(len(payload), count, 0) + bytes(payload)
