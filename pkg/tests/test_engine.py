import random

import pytest
from hypothesis import given, settings, strategies as st

from dds_sim.cachetable import CacheTable
from dds_sim.engine import (CtxStatus, OffloadEngine, PacketBufferPool, build_packets)
from dds_sim.errors import Status
from dds_sim.plugins.kv_log import ITEM, OP_GET, OP_PUT, KVLogPlugin, put_body
from dds_sim.wire import AppRequest, encode_app_request, parse_app_response, split_message


class FakeService:
    """Records reads; the test decides when and in what order they finish."""

    def __init__(self):
        self.reads = []

    def submit_read(self, fid, off, size, dest, callback, path):
        self.reads.append((fid, off, size, dest, callback))

    def finish(self, i, status=Status.SUCCESS):
        fid, off, size, dest, cb = self.reads[i]
        if status is Status.SUCCESS:
            dest[:] = bytes([i % 251 + 1]) * size
        cb(status)


def requests(*pairs):
    raw = b"".join(encode_app_request(op, rid, body) for op, rid, body in pairs)
    return split_message(raw)


def make_engine(keys=(), ring_size=256, pool=None):
    table = CacheTable(1024)
    for i, k in enumerate(keys):
        table.insert(k, ITEM.pack(1, i * 1024, 1024))
    svc = FakeService()
    to_host, to_client = [], []

    def send_to_client(conn, packets, release):
        to_client.append((conn, packets))
        release()

    eng = OffloadEngine(svc, KVLogPlugin(), table, lambda conn, reqs: to_host.extend(r.request_id for r in reqs),
                        send_to_client, mtu=1500, ring_size=ring_size, pool=pool)
    return eng, svc, to_host, to_client


def emitted(to_client):
    out = []
    for _, packets in to_client:
        stream = b"".join(bytes(p.payload) for p in packets)
        pos = 0
        while pos < len(stream):
            rid, st, data = parse_app_response(stream[pos:])
            out.append(rid)
            pos += 16 + len(data)
    return out


KEYS = [b"k%d" % i for i in range(64)]


def test_single_cached_read_goes_to_pooled_buffer():
    eng, svc, to_host, _ = make_engine(KEYS)
    eng.engine_step("c", requests((OP_GET, 1, KEYS[3])))
    (fid, off, size, dest, _), = svc.reads
    assert (fid, off, size) == (1, 3 * 1024, 1024)
    assert dest.obj is eng.pool._arenas[0].obj and to_host == []


def test_completions_3_1_2_emit_1_2_3():
    eng, svc, _, to_client = make_engine(KEYS)
    eng.engine_step("c", requests(*[(OP_GET, i, KEYS[i]) for i in (1, 2, 3)]))
    svc.finish(2)
    assert eng.complete_pending() == 0
    svc.finish(0)
    svc.finish(1)
    assert eng.complete_pending() == 3
    assert emitted(to_client) == [1, 2, 3]


def test_pending_head_blocks_emission():
    eng, svc, _, to_client = make_engine(KEYS)
    eng.engine_step("c", requests(*[(OP_GET, i, KEYS[i]) for i in range(1, 6)]))
    for i in range(1, 5):
        svc.finish(i)
    assert eng.complete_pending() == 0 and to_client == []
    assert eng.ring.slots[0].status is CtxStatus.PENDING


def test_idle_ring_is_a_no_op():
    eng, _, _, to_client = make_engine()
    assert eng.complete_pending() == 0
    eng.engine_step("c", [])
    assert to_client == []


def test_full_ring_sends_the_rest_to_host():
    eng, svc, to_host, _ = make_engine(KEYS, ring_size=2)
    eng.engine_step("c", requests(*[(OP_GET, i, KEYS[i]) for i in range(1, 6)]))
    assert len(svc.reads) == 2 and to_host == [3, 4, 5]
    assert eng.fallback_ring_full == 3


def test_declined_and_unbuffered_requests_fall_back():
    pool = PacketBufferPool(per_class=1, classes=(1024,))
    eng, svc, to_host, _ = make_engine(KEYS[:2], pool=pool)
    eng.engine_step("c", requests((OP_PUT, 1, put_body(b"x", b"y")), (OP_GET, 2, b"absent"),
                                  (OP_GET, 3, KEYS[0]), (OP_GET, 4, KEYS[1])))
    assert to_host == [1, 2, 4] and len(svc.reads) == 1


def test_failed_read_returns_error_status():
    eng, svc, _, to_client = make_engine(KEYS)
    eng.engine_step("c", requests((OP_GET, 7, KEYS[0])))
    svc.finish(0, Status.IO_ERROR)
    eng.complete_pending()
    (_, packets), = to_client
    rid, status, data = parse_app_response(b"".join(bytes(p.payload) for p in packets))
    assert (rid, status, len(data)) == (7, Status.IO_ERROR, 0)


def test_buffers_return_to_pool():
    eng, svc, _, _ = make_engine(KEYS)
    eng.engine_step("c", requests(*[(OP_GET, i, KEYS[i]) for i in range(10)]))
    for i in range(10):
        svc.finish(i)
    eng.complete_pending()
    assert eng.pool.in_use == 0 and eng.ring.occupancy() == 0


def test_segment_3000_at_1500():
    assert [len(p) for p in build_packets(memoryview(bytes(3000)), 1500)] == [1500, 1500]


def test_segment_exact_mtu():
    assert len(build_packets(memoryview(bytes(1500)), 1500)) == 1


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 64 * 1024), st.sampled_from([576, 1500, 9000]))
def test_segmentation_reassembles(size, mtu):
    data = random.Random(size).randbytes(size)
    packets = build_packets(memoryview(data), mtu)
    assert len(packets) == -(-size // mtu)
    assert b"".join(bytes(p.payload) for p in packets) == data
    assert all(p.payload.obj is data for p in packets)
