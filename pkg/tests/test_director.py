import random

import pytest
from hypothesis import given, settings, strategies as st

from dds_sim.cachetable import CacheTable
from dds_sim.director import Director, DirectorConfig, Route, rss_core
from dds_sim.engine import build_packets
from dds_sim.plugins.kv_log import ITEM, OP_GET, OP_PUT, KVLogPlugin, put_body
from dds_sim.simnet import SimClock, StreamEndpoint
from dds_sim.wire import (FiveTuple, MessageReassembler, ResponseReassembler, encode_app_request,
                          encode_app_response, encode_message, parse_app_response,
                          parse_signature, split_message)

SIG = parse_signature("[* : *, 10.10.1.1 : 1111, TCP]")
FLOW = FiveTuple("10.0.0.2", 5000, "10.10.1.1", 1111)


class RecordingEngine:
    def __init__(self):
        self.calls = []

    def engine_step(self, conn, reqs):
        self.calls.append([r.request_id for r in reqs])


class CountingPlugin(KVLogPlugin):
    def __init__(self):
        super().__init__()
        self.pred_calls = 0

    def off_pred(self, msg, table):
        self.pred_calls += 1
        return super().off_pred(msg, table)


class Rig:
    def __init__(self, cached=(), client_mss=1500, passthrough=False, flow=FLOW):
        self.clock = SimClock()
        self.table = CacheTable(1024)
        for k in cached:
            self.table.insert(k, ITEM.pack(1, 0, 1024))
        self.plugin = CountingPlugin()
        self.engines = [RecordingEngine(), RecordingEngine()]
        self.director = Director(self.clock, DirectorConfig([SIG], cores=2, passthrough=passthrough),
                                 self.plugin, self.table, self.engines)
        self.client = StreamEndpoint(self.clock, "client", flow, 100, client_mss)
        self.host = StreamEndpoint(self.clock, "host", flow.reversed(), 5000)
        self.host_msgs = MessageReassembler()
        self.host_got = []
        self.host.on_data = lambda d: self.host_got.extend(self.host_msgs.feed(d))
        self.client_resp = ResponseReassembler()
        self.client_got = []
        self.client.on_data = lambda d: self.client_got.extend(
            parse_app_response(r)[0] for r in self.client_resp.feed(d))
        self.conn = self.director.connect(self.client, self.host)

    def host_rids(self):
        return [[r.request_id for r in split_message(p)] for _, p in self.host_got]

    def engine_rids(self):
        return [rid for e in self.engines for call in e.calls for rid in call]


def get(rid, key):
    return encode_app_request(OP_GET, rid, key)


def put(rid, key):
    return encode_app_request(OP_PUT, rid, put_body(key, b"v" * 50))


def test_classify_matching_and_other_port():
    d = Director(SimClock(), DirectorConfig([SIG], cores=4))
    assert d.classify(FLOW).route is Route.INSPECT
    other = FiveTuple("10.0.0.2", 5000, "10.10.1.1", 2222)
    assert d.classify(other).route is Route.FAST_PATH_HOST


def test_unparseable_address_takes_fast_path():
    d = Director(SimClock(), DirectorConfig([SIG], cores=4))
    assert d.classify(FiveTuple("not-an-ip", 1, "10.10.1.1", 1111)).route is Route.FAST_PATH_HOST


def test_both_directions_share_a_core():
    rng = random.Random(0)
    d = Director(SimClock(), DirectorConfig([SIG], cores=8))
    for _ in range(10_000):
        f = FiveTuple(f"10.{rng.randrange(256)}.{rng.randrange(256)}.{rng.randrange(1, 255)}",
                      rng.randrange(1024, 65536), "10.10.1.1", 1111)
        fwd, rev = d.classify(f), d.classify(f.reversed())
        assert fwd.route is rev.route is Route.INSPECT and fwd.core == rev.core
        assert fwd.core == rss_core(f, 8)


def test_all_cached_reads_stay_on_dpu():
    keys = [b"k%d" % i for i in range(4)]
    rig = Rig(cached=keys)
    rig.client.send(encode_message([get(i + 1, k) for i, k in enumerate(keys)]))
    rig.clock.run_until_idle()
    assert rig.engine_rids() == [1, 2, 3, 4]
    assert rig.host_got == [] and rig.host.bytes_delivered == 0


def test_mixed_message_splits_and_host_stream_stays_contiguous():
    rig = Rig(cached=[b"a", b"b"])
    for base in (0, 10):
        msg = [put(base + 1, b"x"), get(base + 2, b"a"), put(base + 3, b"y"), get(base + 4, b"b")]
        rig.client.send(encode_message(msg))
    rig.clock.run_until_idle()
    assert rig.host_rids() == [[1, 3], [11, 13]]
    assert rig.engine_rids() == [2, 4, 12, 14]
    hs = rig.conn.host_side
    assert rig.host.rcv_nxt == hs.snd_nxt and rig.host.dup_acks == 0
    assert hs.retransmissions == 0


def test_read_after_write_in_same_message_goes_to_host():
    rig = Rig(cached=[b"a"])
    rig.client.send(encode_message([put(1, b"a"), get(2, b"a")]))
    rig.clock.run_until_idle()
    assert rig.host_rids() == [[1, 2]] and rig.engine_rids() == []


@settings(max_examples=40, deadline=None)
@given(st.integers(20, 400))
def test_fragmented_message_parsed_once(mss):
    keys = [b"key%03d" % i for i in range(30)]
    rig = Rig(cached=keys[::2], client_mss=mss)
    msg = encode_message([get(i + 1, k) for i, k in enumerate(keys)])
    rig.client.send(msg)
    rig.clock.run_until_idle()
    assert rig.client.segments_sent >= len(msg) // mss
    assert rig.plugin.pred_calls == 1
    assert sorted(sum(rig.host_rids(), []) + rig.engine_rids()) == list(range(1, 31))


def test_host_and_engine_responses_each_arrive_once():
    rig = Rig()
    rig.host.send(encode_app_response(5, 0, b"host"))
    rec = encode_app_response(6, 0, b"dpu")
    released = []
    rig.director.send_to_client(rig.conn, build_packets(memoryview(rec), 1500), lambda: released.append(1))
    rig.clock.run_until_idle()
    assert sorted(rig.client_got) == [5, 6] and released == [1]


def test_large_engine_response_goes_out_as_its_packets():
    rig = Rig()
    rec = encode_app_response(9, 0, random.Random(0).randbytes(4000))
    packets = build_packets(memoryview(rec), 1500)
    rig.director.send_to_client(rig.conn, packets, lambda: None)
    rig.clock.run_until_idle()
    cs = rig.conn.client_side
    assert cs.segments_sent == len(packets) == 3
    assert rig.client_got == [9]


def test_random_mix_of_host_and_engine_responses():
    rng = random.Random(3)
    rig = Rig()
    rids = list(range(1, 1001))
    for rid in rids:
        body = rng.randbytes(rng.randrange(0, 3000))
        rec = encode_app_response(rid, 0, body)
        if rng.random() < 0.5:
            rig.host.send(rec)
        else:
            rig.director.send_to_client(rig.conn, build_packets(memoryview(rec), 1500), lambda: None)
        if rng.random() < 0.1:
            rig.clock.run(until=rig.clock.now + rng.uniform(0, 20))
    rig.clock.run_until_idle()
    assert sorted(rig.client_got) == rids


def test_unmatched_flow_is_forwarded_untouched():
    other = FiveTuple("10.0.0.2", 5000, "10.10.1.1", 2222)
    rig = Rig(cached=[b"a"], flow=other)
    assert rig.conn is None
    rig.client.send(encode_message([get(1, b"a")]))
    rig.clock.run_until_idle()
    assert rig.host_rids() == [[1]] and rig.engine_rids() == []
    assert rig.director.fast_path_packets > 0


def test_passthrough_without_offload_has_no_retransmissions():
    rig = Rig(passthrough=True)
    for i in range(50):
        rig.client.send(encode_message([get(i + 1, b"miss")]))
    rig.clock.run_until_idle()
    assert rig.client.retransmissions == 0 and rig.host.dup_acks == 0
    assert len(rig.host_rids()) == 50


def test_passthrough_with_offload_stalls_host_stream():
    rig = Rig(cached=[b"hit"], passthrough=True)
    msgs = [[get(1, b"miss")], [get(2, b"hit")], [get(3, b"miss")], [get(4, b"miss")],
            [get(5, b"miss")], [get(6, b"miss")]]
    for m in msgs:
        rig.client.send(encode_message(m))
    rig.clock.run(until=200.0)
    assert rig.host.dup_acks >= 3
    assert rig.client.fast_retransmits >= 1
    assert rig.director.consumed_segments >= 1
