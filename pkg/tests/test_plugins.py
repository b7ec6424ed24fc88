import pytest
from hypothesis import given, strategies as st

from dds_sim.cachetable import CacheTable
from dds_sim.errors import Status
from dds_sim.harness.localfs import LocalFileBackend
from dds_sim.plugins.base import DECLINE, HostOnlyPlugin, ReadOp, WriteOp, get_plugin, plugin_names
from dds_sim.plugins.kv_log import (ITEM, OP_GET, OP_PUT, KVLogPlugin, KVStore, decode_record,
                                    encode_record, put_body)
from dds_sim.plugins.page_lsn import (BODY, OP_APPLY, OP_GETPAGE, PAGE_KEY, PageLSNPlugin,
                                      PageServer, lsn_offloadable, make_page)
from dds_sim.plugins.page_lsn import ITEM as PAGE_ITEM
from dds_sim.simnet import SimClock
from dds_sim.wire import encode_app_request, split_message


def msg(*reqs):
    return split_message(b"".join(encode_app_request(op, rid, body) for op, rid, body in reqs))


@pytest.mark.parametrize("cached, expect", [(None, False), (89, False), (90, True), (91, True)])
def test_lsn_predicate(cached, expect):
    assert lsn_offloadable(cached, 90) is expect
    table = CacheTable(16)
    if cached is not None:
        table.insert(PAGE_KEY.pack(4), PAGE_ITEM.pack(cached, 1, 4 * 8192))
    host, dpu = PageLSNPlugin().off_pred(msg((OP_GETPAGE, 1, BODY.pack(4, 90))), table)
    assert (len(dpu), len(host)) == ((1, 0) if expect else (0, 1))
    op = PageLSNPlugin().off_func(msg((OP_GETPAGE, 1, BODY.pack(4, 90)))[0], table)
    assert (op is not DECLINE) is expect


def test_page_apply_never_offloaded():
    table = CacheTable(16)
    table.insert(PAGE_KEY.pack(1), PAGE_ITEM.pack(99, 1, 8192))
    host, dpu = PageLSNPlugin().off_pred(msg((OP_APPLY, 1, BODY.pack(1, 100))), table)
    assert len(host) == 1 and dpu == []


def test_page_cache_hook_only_for_aligned_pages():
    p = PageLSNPlugin()
    keys, items = p.cache(WriteOp(3, 2 * 8192, memoryview(make_page(2, 17))))
    assert keys == [PAGE_KEY.pack(2)] and PAGE_ITEM.unpack(items[0]) == (17, 3, 2 * 8192)
    assert p.cache(WriteOp(3, 100, memoryview(make_page(2, 17)))) == ([], [])
    assert p.invalidate(ReadOp(3, 8192, 3 * 8192)) == [PAGE_KEY.pack(i) for i in (1, 2, 3)]


@given(st.binary(min_size=1, max_size=64), st.binary(max_size=900))
def test_kv_record_round_trip(key, value):
    rec = encode_record(key, value)
    assert len(rec) == 1024 and decode_record(rec) == (key, value)


def test_kv_cache_and_invalidate_hooks():
    p = KVLogPlugin()
    data = encode_record(b"a", b"1") + encode_record(b"b", b"2")
    keys, items = p.cache(WriteOp(5, 4096, memoryview(data)))
    assert keys == [b"a", b"b"]
    assert [ITEM.unpack(i) for i in items] == [(5, 4096, 1024), (5, 5120, 1024)]
    assert p.invalidate(ReadOp(5, 4096, 2048, memoryview(data))) == [b"a", b"b"]
    assert p.invalidate(ReadOp(5, 4096, 2048)) == []


def test_kv_predicate():
    table = CacheTable(16)
    table.insert(b"hot", ITEM.pack(1, 0, 1024))
    host, dpu = KVLogPlugin().off_pred(
        msg((OP_GET, 1, b"hot"), (OP_GET, 2, b"cold"), (OP_PUT, 3, put_body(b"hot", b"x")),
            (OP_GET, 4, b"hot")), table)
    assert [r.request_id for r in dpu] == [1]
    assert [r.request_id for r in host] == [2, 3, 4]


def test_registry():
    assert {"kv_log", "page_lsn", "host_only"} <= set(plugin_names())
    assert isinstance(get_plugin("kv_log"), KVLogPlugin)
    with pytest.raises(Exception):
        get_plugin("nope")
    h = HostOnlyPlugin()
    assert h.off_pred(msg((OP_GET, 1, b"x")), None)[1] == []


def run_app(app, reqs):
    clock = SimClock()
    fs = LocalFileBackend(clock, latency=5.0)
    group = fs.create_poll()
    app.attach(fs, group)
    for offset, data in getattr(app, "initial_pages", list)():
        fs.write_file(app.handle_, offset, data)
    clock.run_until_idle()
    fs.poll_wait(group)
    out = {}

    def reply(rid, status, data=b""):
        out[rid] = (status, bytes(data))

    def drain():
        for c in fs.poll_wait(group):
            app.on_completion(c)

    fs.on_ready = lambda: clock.after(0.0, drain)
    for req in reqs:
        app.handle(req, reply)
        clock.run_until_idle()
    return out, app


def test_kv_store_get_put_missing():
    reqs = msg((OP_PUT, 1, put_body(b"k", b"v1")), (OP_GET, 2, b"k"), (OP_GET, 3, b"zz"),
               (OP_PUT, 4, put_body(b"k", b"v2")), (OP_GET, 5, b"k"), (9, 6, b""))
    out, _ = run_app(KVStore(), reqs)
    assert decode_record(out[2][1]) == (b"k", b"v1")
    assert out[3][0] is Status.NOT_FOUND
    assert decode_record(out[5][1]) == (b"k", b"v2")
    assert out[6][0] is Status.BAD_OP_KIND


def test_page_server_apply_and_eviction_writeback():
    app = PageServer(pages=8, cache_pages=2)
    reqs = msg(*[(OP_APPLY, i + 1, BODY.pack(i, 10 + i)) for i in range(4)],
               (OP_GETPAGE, 9, BODY.pack(0, 10)))
    out, app = run_app(app, reqs)
    assert all(out[i + 1][0] is Status.SUCCESS for i in range(4))
    assert app.writebacks >= 2
    status, page = out[9]
    assert status is Status.SUCCESS and page == make_page(0, 10)
