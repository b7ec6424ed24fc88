"""Assembles clients, director, engines, file service and host into one
simulated run and reports its metrics."""
from __future__ import annotations

import hashlib
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

from dds_sim.accounting import DEVICE_TO_HOST, ENGINE_READ, HOST_WRITE, MOVES
from dds_sim.blockdev import BlockDevice
from dds_sim.cachetable import CacheTable
from dds_sim.director import Director, DirectorConfig
from dds_sim.engine import OffloadEngine, PacketBufferPool
from dds_sim.errors import InvariantViolation
from dds_sim.fileservice import FileService
from dds_sim.harness.client import (Client, KVWorkload, PageLog, PageWorkload, Results, kv_keys,
                                   kv_preload, literal_preamble)
from dds_sim.harness.config import ScenarioConfig
from dds_sim.harness.hostservice import HostService, ServiceDriver
from dds_sim.harness.localfs import LocalFileBackend
from dds_sim.hostlib import HostFileLib
from dds_sim.plugins.base import get_plugin
from dds_sim.plugins.kv_log import KVStore
from dds_sim.plugins.page_lsn import PageServer
from dds_sim.simnet import SimClock, StreamEndpoint, Tracer
from dds_sim.wire import FiveTuple, parse_signature, split_message

HOST_IP = "10.10.1.1"
HOST_PORT = 1111
HOST_ISN = 5000
AUDITED_PATHS = (HOST_WRITE, DEVICE_TO_HOST, ENGINE_READ)
WALL_FIELDS = ("wall_seconds", "run_wall_seconds", "completions_per_wall_second")


@dataclass
class MetricsReport:
    name: str
    mode: str
    plugin: str
    seed: int
    total_ops: int
    completions: int = 0
    sim_time_us: float = 0.0
    throughput_ops_per_s: float = 0.0
    latency_p50_us: float = 0.0
    latency_p99_us: float = 0.0
    host_served: int = 0
    dpu_served: int = 0
    host_busy_us: float = 0.0
    director_busy_us: float = 0.0
    dma_busy_us: float = 0.0
    payload_copies: dict = field(default_factory=dict)
    movements: dict = field(default_factory=dict)
    retransmissions: int = 0
    fast_retransmits: int = 0
    timeouts: int = 0
    dup_acks: int = 0
    packets: int = 0
    duplicate_responses: int = 0
    engine_fallbacks: dict = field(default_factory=dict)
    table: dict = field(default_factory=dict)
    payload_digest: str = ""
    trace_hash: str = ""
    trace_rows: int = 0
    events: int = 0
    wall_seconds: float = 0.0
    run_wall_seconds: float = 0.0
    completions_per_wall_second: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def deterministic(self) -> dict:
        d = self.to_dict()
        for k in WALL_FIELDS:
            d.pop(k)
        return d


@dataclass
class RunResult:
    report: MetricsReport
    results: Results
    routes: dict            # request id -> "host" | "dpu"
    tracer: Tracer
    world: "World"


def _quantile(sorted_values: list, q: float) -> float:
    if not sorted_values:
        return 0.0
    i = min(len(sorted_values) - 1, max(0, int(round(q * (len(sorted_values) - 1)))))
    return sorted_values[i]


class World:
    """Every component of one run, wired on a shared simulated clock."""

    def __init__(self, cfg: ScenarioConfig, tracer: Tracer) -> None:
        self.cfg = cfg
        self.clock = clock = SimClock(tracer)
        w, d, dpu, host = cfg.workload, cfg.director, cfg.dpu, cfg.host
        offload = cfg.mode == "full_offload"
        self.plugin = None
        self.table = None
        self.service = None
        self.driver = None
        self.engines: list[OffloadEngine] = []

        if cfg.mode == "off":
            fs = LocalFileBackend(clock, host.baseline_latency)
            kick = None
            request_cost = host.baseline_request_cost
        else:
            device = BlockDevice(dpu.device_capacity, latency=tuple(dpu.device_latency), seed=cfg.seed)
            self.service = FileService(device, dpu.segment_size, clock, dpu.copy_mode,
                                       dpu.batch_threshold, dpu.flush_deadline)
            self.service.format()
            self.driver = ServiceDriver(clock, self.service)
            # one attempt per submission: a full ring is handled by deferral, not spinning
            fs = HostFileLib(self.service, dpu.ring_capacity, dpu.max_progress, retry_budget=1,
                             dma_latency=dpu.dma_latency, dma_per_byte=dpu.dma_per_byte)
            kick = self.driver.kick
            request_cost = host.request_cost
        if offload:
            params = ({"record_size": w.io_size} if cfg.plugin == "kv_log"
                      else {"page_size": w.io_size} if cfg.plugin == "page_lsn" else {})
            self.plugin = get_plugin(cfg.plugin, **params)
            self.table = CacheTable(dpu.table_capacity, seed=cfg.seed)
            self.service.set_offload(self.plugin, self.table)
        self.fs = fs

        if cfg.plugin == "page_lsn":
            self.page_log = PageLog(w.keys)
            app = PageServer(w.keys, w.io_size, host.page_cache)
        else:
            app = KVStore(w.io_size, kv_preload(w.keys, w.io_size, cfg.seed) if w.preload else [])
        self.app = app
        self.host = HostService(clock, app, fs, kick=kick, request_cost=request_cost,
                                completion_cost=host.completion_cost,
                                drain_delay=dpu.dma_latency, mss=d.mtu, rto=cfg.network.rto)
        if self.driver is not None:
            self.driver.after_step = self.host.retry_deferred

        dcfg = DirectorConfig(
            signatures=[parse_signature(s) for s in d.signatures] if offload else [],
            cores=d.cores, mtu=d.mtu, inspect_cost=d.inspect_cost,
            link_latency=cfg.network.link_latency, host_link_latency=cfg.network.host_link_latency,
            rto=cfg.network.rto, isn=HOST_ISN + 1, passthrough=d.passthrough)
        self.director = Director(clock, dcfg, self.plugin, self.table)
        if offload:
            for _ in range(d.cores):
                eng = OffloadEngine(self.service, self.plugin, self.table,
                                    self.director.send_to_host, self.director.send_to_client,
                                    mtu=d.mtu, ring_size=dpu.context_ring,
                                    pool=PacketBufferPool(dpu.pool_per_class), copy_mode=dpu.copy_mode)
                eng.on_complete = self._engine_waker(eng)
                self.engines.append(eng)
            self.director.engines = self.engines

        self.results = Results(keep_log=cfg.record_routes)
        self.clients: list[Client] = []

    def _engine_waker(self, eng: OffloadEngine):
        armed = [False]

        def run():
            armed[0] = False
            eng.complete_pending()

        def wake(_eng):
            if not armed[0]:
                armed[0] = True
                self.clock.after(0.0, run)
        return wake

    def setup(self) -> None:
        """Load the data set through the host path before any client connects."""
        cfg = self.cfg
        if cfg.plugin == "page_lsn":
            self.host.write_initial(self.app.handle_, self.app.initial_pages())
        else:
            raws = self.app.load_requests()
            reqs = [split_message(r)[0] for r in raws]
            self.host.run_internal(reqs)
        self.host.served = 0

    def connect_clients(self) -> None:
        cfg = self.cfg
        w = cfg.workload
        share, extra = divmod(w.total_ops, w.connections)
        for i in range(w.connections):
            flow = FiveTuple(f"10.0.{i // 250}.{i % 250 + 2}", 5000 + i, HOST_IP, HOST_PORT)
            cep = StreamEndpoint(self.clock, f"client{i}", flow, cfg.director.isn, cfg.director.mtu,
                                 rto=cfg.network.rto)
            hep = self.host.accept(flow.reversed(), HOST_ISN)
            self.director.connect(cep, hep)
            client = Client(self.clock, i, cep, self._workload(i), self.results,
                            ops=share + (1 if i < extra else 0),
                            per_message=w.requests_per_message, outstanding=w.outstanding_messages)
            self.clients.append(client)

    def _workload(self, i: int):
        cfg = self.cfg
        w = cfg.workload
        seed = f"{cfg.seed}-{i}"
        if cfg.plugin == "page_lsn":
            return PageWorkload(self.page_log, w.read_fraction, seed, w.key_skew)
        return KVWorkload(w.keys, w.read_fraction, w.io_size, seed, w.key_skew)

    def start_clients(self) -> None:
        for i, c in enumerate(self.clients):
            pre = literal_preamble(kv_keys(self.cfg.workload.keys)) if (i == 0 and self.cfg.literal_preamble) else None
            c.start(pre)


def run_scenario(cfg: ScenarioConfig, *, keep_trace: bool = False, check: bool = True) -> RunResult:
    tracer = Tracer(keep=keep_trace, transport=cfg.trace_transport)
    MOVES.reset()
    wall0 = time.perf_counter()
    world = World(cfg, tracer)
    if cfg.literal_preamble and cfg.plugin != "kv_log":
        raise ValueError("literal_preamble needs the kv_log plugin")
    routes: dict = {}
    run_wall = 0.0
    if cfg.workload.total_ops:
        world.setup()
        MOVES.reset()
        host_log: list = []
        dpu_log: list = []
        world.host.served_log = host_log
        for e in world.engines:
            e.served_log = dpu_log
        world.connect_clients()
        tracer(world.clock.now, "harness", "start",
               f"mode={cfg.mode} plugin={cfg.plugin} seed={cfg.seed} ops={cfg.workload.total_ops}")
        run0 = time.perf_counter()
        world.start_clients()
        world.clock.run_until_idle()
        run_wall = time.perf_counter() - run0
        for rid in host_log:
            routes[rid] = "host"
        for rid in dpu_log:
            routes[rid] = "dpu" if rid not in routes else "both"
        tracer(world.clock.now, "harness", "end", f"completions={len(world.results.latencies)}")
    wall = time.perf_counter() - wall0
    report = _report(world, routes, wall, run_wall)
    if check and cfg.workload.total_ops:
        check_invariants(world, report, routes)
    return RunResult(report, world.results, routes, tracer, world)


def _report(world: World, routes: dict, wall: float, run_wall: float) -> MetricsReport:
    cfg = world.cfg
    res = world.results
    lat = sorted(res.latencies)
    n = len(lat)
    span = (res.last_completion - res.first_send) if res.first_send is not None else 0.0
    r = MetricsReport(cfg.name, cfg.mode, cfg.plugin, cfg.seed, cfg.workload.total_ops)
    r.completions = n
    r.sim_time_us = round(span, 4)
    r.throughput_ops_per_s = round(n / span * 1e6, 3) if span > 0 else 0.0
    r.latency_p50_us = round(_quantile(lat, 0.50), 4)
    r.latency_p99_us = round(_quantile(lat, 0.99), 4)
    r.host_served = sum(1 for v in routes.values() if v == "host")
    r.dpu_served = sum(1 for v in routes.values() if v == "dpu")
    r.host_busy_us = round(world.host.busy_time, 4)
    r.director_busy_us = round(world.director.busy_time, 4)
    r.dma_busy_us = round(world.driver.dma_time, 4) if world.driver else 0.0
    r.payload_copies = {p: MOVES.copies(p) for p in sorted({k[0] for k in MOVES.events})}
    r.movements = MOVES.by_path()
    eps = [c.endpoint for c in world.clients] + [hc.endpoint for hc in world.host.conns]
    for conn in world.director.connections:
        eps += [e for e in (conn.client_side, conn.host_side) if e is not None]
    for e in eps:
        r.retransmissions += e.retransmissions
        r.fast_retransmits += e.fast_retransmits
        r.timeouts += e.timeouts
        r.dup_acks += e.dup_acks
        r.packets += e.segments_sent
    r.duplicate_responses = res.duplicates
    if world.engines:
        r.engine_fallbacks = {
            "ring_full": sum(e.fallback_ring_full for e in world.engines),
            "declined": sum(e.fallback_declined for e in world.engines),
            "no_buffer": sum(e.fallback_no_buffer for e in world.engines),
            "errors": sum(e.errors for e in world.engines),
        }
    if world.table is not None:
        t = world.table
        r.table = {"items": len(t), "max_probes": t.max_probes, "resizes": t.resizes,
                   "table_full": t.table_full + world.service.hook_stats["table_full"],
                   "kicks": t.kicks, "chained": t.chained}
    h = hashlib.blake2b(digest_size=16)
    for rid in sorted(res.digests):
        h.update(rid.to_bytes(8, "little") + res.statuses[rid].to_bytes(1, "little") + res.digests[rid])
    r.payload_digest = h.hexdigest()
    r.trace_hash = world.clock.trace.hexdigest()
    r.trace_rows = world.clock.trace.count
    r.events = world.clock.events
    r.wall_seconds = round(wall, 4)
    r.run_wall_seconds = round(run_wall, 4)
    r.completions_per_wall_second = round(n / run_wall, 1) if run_wall > 0 else 0.0
    return r


def check_invariants(world: World, report: MetricsReport, routes: dict) -> None:
    """Raise :class:`InvariantViolation` on any accounting or state inconsistency."""
    cfg = world.cfg
    res = world.results
    problems = []
    pending = sum(c.pending for c in world.clients)
    if pending:
        problems.append(f"{pending} requests never completed")
    if res.issued != cfg.workload.total_ops:
        problems.append(f"issued {res.issued} of {cfg.workload.total_ops} requests")
    if len(res.latencies) != res.issued:
        problems.append(f"{len(res.latencies)} completions for {res.issued} requests")
    if not cfg.director.passthrough:
        if res.duplicates:
            problems.append(f"{res.duplicates} duplicate responses")
        if report.host_served + report.dpu_served != cfg.workload.total_ops:
            problems.append(f"host {report.host_served} + dpu {report.dpu_served} "
                            f"!= total {cfg.workload.total_ops}")
        both = sum(1 for v in routes.values() if v == "both")
        if both:
            problems.append(f"{both} requests answered by both host and DPU")
    for e in world.engines:
        if e.pool.in_use:
            problems.append(f"{e.pool.in_use} packet buffers not released")
        if e.ring.occupancy():
            problems.append(f"{e.ring.occupancy()} engine contexts still held")
    if world.table is not None and world.table.resizes:
        problems.append("cache table resized")
    if world.service is not None:
        if world.service.busy():
            problems.append("file service still has work after the run")
        for g in world.service.groups:
            rb = g.responses
            if not rb.tail_c <= rb.tail_b <= rb.tail_a:
                problems.append(f"group {g.group_id}: tail order violated")
        if not cfg.dpu.copy_mode:
            for p in AUDITED_PATHS:
                if MOVES.copies(p):
                    problems.append(f"{MOVES.copies(p)} payload copies on {p}")
    if world.host.files.backlog:
        problems.append(f"{world.host.files.backlog} host file submissions still deferred")
    if world.app.outstanding_io():
        problems.append(f"{world.app.outstanding_io()} host file operations outstanding")
    if problems:
        raise InvariantViolation("; ".join(problems))
