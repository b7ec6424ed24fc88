"""Simulated host side: the request executor and the event wiring that
drives the DPU file service on the simulated clock."""
from __future__ import annotations

import itertools
from collections import deque
from typing import Callable, Optional

from dds_sim.errors import DDSError, Status
from dds_sim.hostlib import Completion
from dds_sim.simnet import SimClock, StreamEndpoint
from dds_sim.wire import MessageReassembler, encode_app_response, split_message


class ServiceDriver:
    """Runs ``service_loop_step`` whenever there may be work.

    Each step is an event; a step that made progress schedules another one
    after the DMA time it consumed.  Device submissions schedule a device
    tick at their due time, and buffered responses schedule a step at their
    flush deadline.
    """

    def __init__(self, clock: SimClock, service, min_step: float = 0.05) -> None:
        self.clock = clock
        self.service = service
        self.min_step = min_step
        self.steps = 0
        self.dma_time = 0.0
        self._step_at: Optional[float] = None
        self._flush_at: Optional[float] = None
        self._ticks: set = set()
        self.after_step: Optional[Callable[[], None]] = None
        service.clock = clock
        service.device.on_submit = self._on_submit

    def kick(self, delay: float = 0.0) -> None:
        when = self.clock.now + delay
        if self._step_at is not None and self._step_at <= when:
            return
        self._step_at = when
        self.clock.at(when, self._step, when)

    def _step(self, when: float) -> None:
        if self._step_at != when:
            return                       # superseded by an earlier kick
        self._step_at = None
        rep = self.service.service_loop_step()
        self.steps += 1
        self.dma_time += rep.dma_time
        if not rep.idle:
            if self.after_step is not None:
                self.after_step()
            self.kick(max(rep.dma_time, self.min_step))
        nf = self.service.next_flush()
        if nf is not None and nf != self._flush_at:
            self._flush_at = nf
            self.clock.at(nf, self._flush, nf)

    def _flush(self, when: float) -> None:
        if self._flush_at == when:
            self._flush_at = None
        self.kick()

    def _on_submit(self, due: float) -> None:
        if due not in self._ticks:
            self._ticks.add(due)
            self.clock.at(due, self._tick, due)

    def _tick(self, due: float) -> None:
        self._ticks.discard(due)
        if self.service.device.tick(self.clock.now):
            self.kick()


class DeferringFiles:
    """Wraps the file API so a full request ring defers a submission instead of failing.

    Callers get a ticket immediately; deferred submissions are retried in
    order whenever the DPU has made room.  Completions carry the ticket.
    """

    def __init__(self, fs) -> None:
        self.fs = fs
        self._tickets = itertools.count(1)
        self._by_rid: dict = {}
        self._queue: deque = deque()
        self.deferred = 0

    def __getattr__(self, name):
        return getattr(self.fs, name)

    def _call(self, fn, *args) -> int:
        t = next(self._tickets)
        if self._queue or not self._try(t, fn, args):
            self._queue.append((t, fn, args))
            self.deferred += 1
        return t

    def _try(self, ticket: int, fn, args) -> bool:
        try:
            rid = fn(*args)
        except DDSError as e:
            if e.status is Status.RING_FULL:
                return False
            raise
        self._by_rid[rid] = ticket
        return True

    def retry(self) -> bool:
        q = self._queue
        progressed = False
        while q and self._try(*q[0]):
            q.popleft()
            progressed = True
        return progressed

    @property
    def backlog(self) -> int:
        return len(self._queue)

    def read_file(self, handle, offset, length, destination) -> int:
        return self._call(self.fs.read_file, handle, offset, length, destination)

    def write_file(self, handle, offset, source) -> int:
        return self._call(self.fs.write_file, handle, offset, source)

    def poll_wait(self, group, max_completions=None, timeout=0.0) -> list:
        by_rid = self._by_rid
        return [Completion(by_rid.pop(c.request_id), c.status, c.length)
                for c in self.fs.poll_wait(group, max_completions, timeout)]


class _HostConn:
    __slots__ = ("conn_id", "endpoint", "requests", "outbox")

    def __init__(self, conn_id: int, endpoint: StreamEndpoint) -> None:
        self.conn_id = conn_id
        self.endpoint = endpoint
        self.requests = MessageReassembler()
        self.outbox: list = []


class HostService:
    """Executes forwarded requests with a host app and answers on the same stream.

    The host CPU is one server: each request costs ``request_cost`` and each
    file completion ``completion_cost`` simulated microseconds, accumulated
    in ``busy_time``.  Replies produced within one event go out as one send.
    """

    def __init__(self, clock: SimClock, app, fs, *, kick: Optional[Callable[[], None]] = None,
                 request_cost: float = 1.0, completion_cost: float = 0.5,
                 drain_delay: float = 1.0, mss: int = 1500, rto: float = 1000.0) -> None:
        self.clock = clock
        self.app = app
        self.fs = fs
        self.kick = kick or (lambda: None)
        self.request_cost = request_cost
        self.completion_cost = completion_cost
        self.drain_delay = drain_delay
        self.mss = mss
        self.rto = rto
        self.files = DeferringFiles(fs)
        self.conns: list[_HostConn] = []
        self.busy_time = 0.0
        self._free_at = 0.0
        self._drain_scheduled = False
        self._dirty: list = []
        self.served = 0
        self.served_log: Optional[list] = None
        self.internal_done = 0
        self.group = fs.create_poll()
        app.attach(self.files, self.group)
        channel = getattr(self.group, "channel", None)
        if channel is not None:
            channel.interrupt = self._on_interrupt
        else:
            fs.on_ready = self._on_interrupt

    # -- connections -----------------------------------------------------------

    def accept(self, flow, isn: int) -> StreamEndpoint:
        """A host endpoint sending on ``flow`` (host -> client)."""
        ep = StreamEndpoint(self.clock, f"host{len(self.conns)}", flow, isn, self.mss, rto=self.rto)
        hc = _HostConn(len(self.conns), ep)
        ep.on_data = lambda data, hc=hc: self._on_data(hc, data)
        self.conns.append(hc)
        return ep

    def _on_data(self, hc: _HostConn, data) -> None:
        for count, payload in hc.requests.feed(data):
            reqs = split_message(payload)
            cost = self.request_cost * len(reqs)
            start = max(self.clock.now, self._free_at)
            self._free_at = start + cost
            self.busy_time += cost
            self.clock.at(self._free_at, self._execute, hc, reqs)

    def _execute(self, hc: _HostConn, reqs: list) -> None:
        reply = self._replier(hc)
        for req in reqs:
            self.app.handle(req, reply)
        self.kick()

    def _replier(self, hc: _HostConn):
        def reply(rid: int, status, data=b"") -> None:
            self.served += 1
            if self.served_log is not None:
                self.served_log.append(rid)
            if not hc.outbox:
                self._dirty.append(hc)
                if len(self._dirty) == 1:
                    self.clock.after(0.0, self._flush)
            hc.outbox.append(encode_app_response(rid, int(status), data))
        return reply

    def _flush(self) -> None:
        dirty, self._dirty = self._dirty, []
        for hc in dirty:
            out, hc.outbox = hc.outbox, []
            hc.endpoint.send(b"".join(out))

    # -- file completions ---------------------------------------------------------

    def retry_deferred(self) -> None:
        if self.files.backlog and self.files.retry():
            self.kick()

    def _on_interrupt(self) -> None:
        if not self._drain_scheduled:
            self._drain_scheduled = True
            self.clock.after(self.drain_delay, self._drain)

    def _drain(self) -> None:
        self._drain_scheduled = False
        done = self.files.poll_wait(self.group, None, 0.0)
        if not done:
            return
        cost = self.completion_cost * len(done)
        self.busy_time += cost
        self._free_at = max(self.clock.now, self._free_at) + cost
        for c in done:
            self.app.on_completion(c)
        self.kick()

    # -- setup -------------------------------------------------------------------

    def run_internal(self, reqs: list, batch: int = 256) -> None:
        """Execute requests with no client attached, ``batch`` at a time, to completion."""
        failures = []

        def reply(rid, status, data=b""):
            self.internal_done += 1
            if status != Status.SUCCESS:
                failures.append((rid, status))

        for at in range(0, len(reqs), batch):
            for req in reqs[at:at + batch]:
                self.app.handle(req, reply)
            self.kick()
            self.clock.run_until_idle()
        if failures:
            rid, status = failures[0]
            raise DDSError(Status(status), f"setup request {rid} failed ({len(failures)} total)")

    def write_initial(self, handle, chunks: list, batch: int = 256) -> None:
        """Write ``(offset, bytes)`` chunks through the file API and wait for them."""
        failures = []
        for at in range(0, len(chunks), batch):
            for off, data in chunks[at:at + batch]:
                def done(c):
                    if c.status is not Status.SUCCESS:
                        failures.append(c)
                self.app.issue(self.files.write_file(handle, off, data), done)
            self.kick()
            self.clock.run_until_idle()
        if failures:
            raise DDSError(failures[0].status, "initial write failed")
