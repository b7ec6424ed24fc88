"""Append-only key-value log: PUTs go to the host, GETs of cached keys are
served by the DPU straight from the log file."""
from __future__ import annotations

import struct
from typing import Optional

from dds_sim.errors import Status
from dds_sim.plugins.base import DECLINE, HostApp, OffloadPlugin, ReadOp, WriteOp, register
from dds_sim.wire import AppRequest, encode_app_request

OP_GET = 1
OP_PUT = 2

RECORD_SIZE = 1024
RECORD_HEADER = struct.Struct("<HHI")     # key_len, flags, value_len
PUT_BODY = struct.Struct("<H")            # key_len, then key, then value
ITEM = struct.Struct("<IQI")              # file id, file offset, record size
MAX_KEY = 64


def encode_record(key: bytes, value: bytes, record_size: int = RECORD_SIZE) -> bytes:
    n = RECORD_HEADER.size + len(key) + len(value)
    if n > record_size:
        raise ValueError(f"record of {n} bytes does not fit in {record_size}")
    return RECORD_HEADER.pack(len(key), 0, len(value)) + key + value + bytes(record_size - n)


def decode_record(record) -> Optional[tuple[bytes, bytes]]:
    """(key, value), or ``None`` if ``record`` does not hold a valid record."""
    if len(record) < RECORD_HEADER.size:
        return None
    klen, _flags, vlen = RECORD_HEADER.unpack_from(record, 0)
    start = RECORD_HEADER.size
    if not 0 < klen <= MAX_KEY or start + klen + vlen > len(record):
        return None
    return bytes(record[start:start + klen]), bytes(record[start + klen:start + klen + vlen])


def put_body(key: bytes, value: bytes) -> bytes:
    return PUT_BODY.pack(len(key)) + key + value


def split_put(body) -> tuple[bytes, bytes]:
    (klen,) = PUT_BODY.unpack_from(body, 0)
    return bytes(body[2:2 + klen]), bytes(body[2 + klen:])


def request_key(req: AppRequest) -> bytes:
    if req.op == OP_PUT:
        return split_put(req.body)[0]
    return bytes(req.body)


@register
class KVLogPlugin(OffloadPlugin):
    name = "kv_log"

    def __init__(self, record_size: int = RECORD_SIZE) -> None:
        self.record_size = record_size

    def off_pred(self, msg, table):
        host, dpu = [], []
        written = set()
        for req in msg:
            if req.op == OP_GET:
                key = bytes(req.body)
                if key not in written and table.lookup(key) is not None:
                    dpu.append(req)
                    continue
            elif req.op == OP_PUT:
                written.add(request_key(req))
            host.append(req)
        return host, dpu

    def off_func(self, req, table):
        if req.op != OP_GET:
            return DECLINE
        item = table.lookup(bytes(req.body))
        if item is None:
            return DECLINE
        fid, off, size = ITEM.unpack(item)
        return ReadOp(fid, off, size)

    def _records(self, data):
        rs = self.record_size
        for at in range(0, len(data) - rs + 1, rs):
            got = decode_record(data[at:at + rs])
            if got is not None:
                yield at, got[0]

    def cache(self, op: WriteOp):
        keys, items = [], []
        for at, key in self._records(op.data):
            keys.append(key)
            items.append(ITEM.pack(op.file_id, op.offset + at, self.record_size))
        return keys, items

    def invalidate(self, op: ReadOp):
        if op.data is None:
            return []
        return [key for _, key in self._records(op.data)]


class KVStore(HostApp):
    """Host side: an index over an append-only log file."""

    def __init__(self, record_size: int = RECORD_SIZE, preload: Optional[list] = None) -> None:
        super().__init__()
        self.record_size = record_size
        self.index: dict[bytes, int] = {}
        self.tail = 0
        self.inflight: dict[bytes, list] = {}   # key -> GETs waiting on its PUTs
        self._puts: dict[bytes, int] = {}
        self.preload = preload or []

    def setup(self) -> None:
        d = self.fs.create_directory("kv")
        self.handle_ = self.fs.create_file(d, "log")
        self.fs.poll_add(self.group, self.handle_)

    def load_requests(self):
        return [encode_app_request(OP_PUT, 0, put_body(k, v)) for k, v in self.preload]

    def handle(self, req: AppRequest, reply) -> None:
        if req.op == OP_PUT:
            self._put(req.request_id, *split_put(req.body), reply)
        elif req.op == OP_GET:
            self._get(req.request_id, bytes(req.body), reply)
        else:
            reply(req.request_id, Status.BAD_OP_KIND, b"")

    def _put(self, rid: int, key: bytes, value: bytes, reply) -> None:
        off = self.tail
        self.tail += self.record_size
        self._puts[key] = self._puts.get(key, 0) + 1
        self.inflight.setdefault(key, [])

        def done(c, key=key, off=off):
            if c.status is Status.SUCCESS and off >= self.index.get(key, -1):
                self.index[key] = off
            self._puts[key] -= 1
            if not self._puts[key]:
                del self._puts[key]
                for waiting in self.inflight.pop(key):
                    waiting()
            reply(rid, c.status, b"")

        self.issue(self.fs.write_file(self.handle_, off, encode_record(key, value, self.record_size)), done)

    def _get(self, rid: int, key: bytes, reply) -> None:
        if key in self._puts:
            self.inflight[key].append(lambda: self._get(rid, key, reply))
            return
        off = self.index.get(key)
        if off is None:
            reply(rid, Status.NOT_FOUND, b"")
            return
        buf = bytearray(self.record_size)

        def done(c, buf=buf):
            reply(rid, c.status, buf if c.status is Status.SUCCESS else b"")

        self.issue(self.fs.read_file(self.handle_, off, self.record_size, buf), done)
