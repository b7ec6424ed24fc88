"""Byte layouts for everything that crosses a component boundary.

All integers are little-endian and every ring record is padded to
``RECORD_ALIGN`` bytes.  Field offsets are listed in WIRE.md.
"""
from __future__ import annotations

import enum
import ipaddress
import re
import struct
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from dds_sim.errors import DDSError, Status

RECORD_ALIGN = 64

# request_id, op_kind, 3 reserved, file_id, offset, length, total_record_size
REQUEST_HEADER = struct.Struct("<QB3xIQII")
REQUEST_HEADER_SIZE = REQUEST_HEADER.size  # 32
# request_id, status, kind, 2 reserved, length, total_record_size, 12 reserved
RESPONSE_HEADER = struct.Struct("<QBB2xII12x")
RESPONSE_HEADER_SIZE = RESPONSE_HEADER.size  # 32
RESPONSE_STATUS_OFFSET = 8

RESPONSE_KIND_DATA = 0
RESPONSE_KIND_PAD = 1


class OpKind(enum.IntEnum):
    READ = 1
    WRITE = 2
    READ_SCATTER = 3
    WRITE_GATHER = 4
    MESSAGE = 5
    PAD = 127


WRITE_KINDS = frozenset({OpKind.WRITE, OpKind.WRITE_GATHER, OpKind.MESSAGE})
READ_KINDS = frozenset({OpKind.READ, OpKind.READ_SCATTER})
_VALID_OPS = frozenset(int(k) for k in OpKind)


def align(n: int, to: int = RECORD_ALIGN) -> int:
    return (n + to - 1) & ~(to - 1)


def request_record_size(op_kind: int, length: int) -> int:
    if op_kind in WRITE_KINDS:
        return align(REQUEST_HEADER_SIZE + length)
    return align(REQUEST_HEADER_SIZE)


def response_record_size(op_kind: int, length: int) -> int:
    """Bytes a response to ``op_kind`` occupies; reads carry ``length`` bytes."""
    if op_kind in READ_KINDS:
        return align(RESPONSE_HEADER_SIZE + length)
    return align(RESPONSE_HEADER_SIZE)


@dataclass(frozen=True)
class FileRequestHeader:
    request_id: int
    op_kind: OpKind
    file_id: int
    offset: int
    length: int
    total_record_size: int = 0

    def __post_init__(self) -> None:
        if not self.total_record_size:
            object.__setattr__(self, "total_record_size",
                               request_record_size(self.op_kind, self.length))


@dataclass(frozen=True)
class FileResponseHeader:
    request_id: int
    status: Status
    length: int
    total_record_size: int
    kind: int = RESPONSE_KIND_DATA


def encode_request(header: FileRequestHeader, payload: bytes = b"") -> bytes:
    """Encode one request record: header, inline write payload, zero padding."""
    buf = bytearray(header.total_record_size)
    encode_request_into(buf, 0, header.request_id, header.op_kind, header.file_id,
                        header.offset, header.length, (payload,) if payload else ())
    return bytes(buf)


def encode_request_into(buf, pos: int, request_id: int, op_kind: int, file_id: int,
                        offset: int, length: int, sources: Sequence = ()) -> int:
    """Write a request record directly into ``buf`` at ``pos``.

    Write payloads are gathered from ``sources`` straight into the record, so
    the caller's bytes are placed exactly once.  Returns the record size.
    """
    if op_kind not in _VALID_OPS:
        raise DDSError(Status.BAD_OP_KIND, f"op {op_kind}")
    total = request_record_size(op_kind, length)
    got = sum(len(s) for s in sources)
    if op_kind in WRITE_KINDS:
        if got != length:
            raise DDSError(Status.LENGTH_MISMATCH, f"payload {got} != length {length}")
    elif got:
        raise DDSError(Status.LENGTH_MISMATCH, "reads carry no payload")
    REQUEST_HEADER.pack_into(buf, pos, request_id, op_kind, file_id, offset, length, total)
    at = pos + REQUEST_HEADER_SIZE
    for s in sources:
        n = len(s)
        buf[at:at + n] = s
        at += n
    end = pos + total
    if at < end:
        buf[at:end] = bytes(end - at)
    return total


def decode_request(record, pos: int = 0) -> tuple[FileRequestHeader, memoryview, int]:
    """Decode the request at ``pos``; returns (header, payload view, bytes consumed)."""
    mv = memoryview(record)
    avail = len(mv) - pos
    if avail < REQUEST_HEADER_SIZE:
        raise DDSError(Status.TRUNCATED, f"{avail} bytes < header")
    rid, op, fid, off, length, total = REQUEST_HEADER.unpack_from(mv, pos)
    if op not in _VALID_OPS:
        raise DDSError(Status.BAD_OP_KIND, f"op {op}")
    if total > avail:
        raise DDSError(Status.TRUNCATED, f"record {total} > {avail} available")
    if op == OpKind.PAD:
        return FileRequestHeader(rid, OpKind.PAD, fid, off, length, total), mv[pos:pos], total
    if total != request_record_size(op, length):
        raise DDSError(Status.LENGTH_MISMATCH, f"total {total} for length {length}")
    if op in WRITE_KINDS:
        payload = mv[pos + REQUEST_HEADER_SIZE:pos + REQUEST_HEADER_SIZE + length]
    else:
        payload = mv[pos:pos]
    return FileRequestHeader(rid, OpKind(op), fid, off, length, total), payload, total


def encode_pad_request(buf, pos: int, size: int) -> None:
    REQUEST_HEADER.pack_into(buf, pos, 0, OpKind.PAD, 0, 0, 0, size)


def encode_response(header: FileResponseHeader, data: bytes = b"") -> bytes:
    if len(data) != header.length:
        raise DDSError(Status.LENGTH_MISMATCH, f"data {len(data)} != length {header.length}")
    if header.total_record_size < align(RESPONSE_HEADER_SIZE + header.length):
        raise DDSError(Status.LENGTH_MISMATCH, "total_record_size too small")
    buf = bytearray(header.total_record_size)
    RESPONSE_HEADER.pack_into(buf, 0, header.request_id, header.status, header.kind,
                              header.length, header.total_record_size)
    buf[RESPONSE_HEADER_SIZE:RESPONSE_HEADER_SIZE + header.length] = data
    return bytes(buf)


def decode_response(record, pos: int = 0) -> tuple[FileResponseHeader, memoryview, int]:
    mv = memoryview(record)
    avail = len(mv) - pos
    if avail < RESPONSE_HEADER_SIZE:
        raise DDSError(Status.TRUNCATED, f"{avail} bytes < header")
    rid, status, kind, length, total = RESPONSE_HEADER.unpack_from(mv, pos)
    if total > avail:
        raise DDSError(Status.TRUNCATED, f"record {total} > {avail} available")
    if total < align(RESPONSE_HEADER_SIZE + (0 if kind == RESPONSE_KIND_PAD else length)):
        raise DDSError(Status.LENGTH_MISMATCH, f"total {total} for length {length}")
    data = mv[pos + RESPONSE_HEADER_SIZE:pos + RESPONSE_HEADER_SIZE + length]
    return FileResponseHeader(rid, Status(status), length, total, kind), data, total


def encode_pad_response(buf, pos: int, size: int) -> None:
    RESPONSE_HEADER.pack_into(buf, pos, 0, Status.SUCCESS, RESPONSE_KIND_PAD, 0, size)


# -- flows ------------------------------------------------------------------

PROTO_TCP = "TCP"
PROTO_UDP = "UDP"


@dataclass(frozen=True)
class FiveTuple:
    """A directed flow key; ``src`` is the sender of the packet."""
    src_ip: str
    src_port: int
    dst_ip: str
    dst_port: int
    proto: str = PROTO_TCP

    def reversed(self) -> "FiveTuple":
        return FiveTuple(self.dst_ip, self.dst_port, self.src_ip, self.src_port, self.proto)


@dataclass(frozen=True)
class FlowSignature:
    """Flow filter in client->server orientation; ``None`` is a wildcard."""
    client_ip: Optional[str]
    client_port: Optional[int]
    server_ip: str
    server_port: int
    protocol: str = PROTO_TCP

    def __post_init__(self) -> None:
        if self.server_ip is None or self.server_port is None or self.protocol is None:
            raise ValueError("server ip, server port and protocol must be concrete")

    def __str__(self) -> str:
        def f(v):
            return "*" if v is None else str(v)
        return (f"[{f(self.client_ip)} : {f(self.client_port)}, "
                f"{self.server_ip} : {self.server_port}, {self.protocol}]")


_SIG_RE = re.compile(
    r"^\[\s*(?P<cip>[^:,\s]+)\s*:\s*(?P<cport>[^,\s]+)\s*,"
    r"\s*(?P<sip>[^:,\s]+)\s*:\s*(?P<sport>[^,\s]+)\s*,\s*(?P<proto>\w+)\s*\]$")


def parse_signature(text: str) -> FlowSignature:
    """Parse ``[client_ip:client_port, server_ip:server_port, PROTO]`` with ``*`` wildcards."""
    m = _SIG_RE.match(text.strip())
    if not m:
        raise ValueError(f"bad signature {text!r}")

    def ip(v: str) -> Optional[str]:
        if v == "*":
            return None
        return str(ipaddress.ip_address(v))

    def port(v: str) -> Optional[int]:
        if v == "*":
            return None
        p = int(v)
        if not 0 <= p <= 65535:
            raise ValueError(f"port out of range: {p}")
        return p

    proto = m["proto"].upper()
    if proto not in (PROTO_TCP,):
        raise ValueError(f"unsupported protocol {proto}")
    sip, sport = ip(m["sip"]), port(m["sport"])
    if sip is None or sport is None:
        raise ValueError("server endpoint must be concrete")
    return FlowSignature(ip(m["cip"]), port(m["cport"]), sip, sport, proto)


def match_signature(sig: FlowSignature, flow: FiveTuple) -> bool:
    """True iff every concrete field of ``sig`` equals the client->server ``flow``."""
    return ((sig.client_ip is None or sig.client_ip == flow.src_ip)
            and (sig.client_port is None or sig.client_port == flow.src_port)
            and sig.server_ip == flow.dst_ip
            and sig.server_port == flow.dst_port
            and sig.protocol == flow.proto)


# -- client <-> server application framing ---------------------------------

# message_length (payload bytes after this header), request_count, reserved
MESSAGE_HEADER = struct.Struct("<IHH")
MESSAGE_HEADER_SIZE = MESSAGE_HEADER.size
# op, flags, reserved, body_len, request_id
APP_REQUEST = struct.Struct("<BBHIQ")
APP_REQUEST_SIZE = APP_REQUEST.size
# request_id, status, flags, reserved, data_len
APP_RESPONSE = struct.Struct("<QBBHI")
APP_RESPONSE_SIZE = APP_RESPONSE.size


@dataclass
class AppRequest:
    """One application request inside a client message."""
    op: int
    request_id: int
    body: memoryview
    raw: memoryview


def encode_app_request(op: int, request_id: int, body: bytes) -> bytes:
    return APP_REQUEST.pack(op, 0, 0, len(body), request_id) + bytes(body)


def encode_message(requests: Sequence[bytes]) -> bytes:
    """Frame already-encoded application requests into one client message."""
    if not requests:
        raise ValueError("a message carries at least one request")
    payload = b"".join(requests)
    return MESSAGE_HEADER.pack(len(payload), len(requests), 0) + payload


def frame_message(raws: Sequence) -> bytes:
    """Re-frame request views (possibly from different messages) without parsing them."""
    n = sum(len(r) for r in raws)
    out = bytearray(MESSAGE_HEADER_SIZE + n)
    MESSAGE_HEADER.pack_into(out, 0, n, len(raws), 0)
    at = MESSAGE_HEADER_SIZE
    for r in raws:
        out[at:at + len(r)] = r
        at += len(r)
    return bytes(out)


def split_message(payload) -> list[AppRequest]:
    """Split a message payload (framing header removed) into its requests."""
    mv = memoryview(payload)
    out = []
    pos = 0
    end = len(mv)
    while pos < end:
        if end - pos < APP_REQUEST_SIZE:
            raise DDSError(Status.TRUNCATED, "partial request header")
        op, _flags, _r, blen, rid = APP_REQUEST.unpack_from(mv, pos)
        stop = pos + APP_REQUEST_SIZE + blen
        if stop > end:
            raise DDSError(Status.TRUNCATED, "partial request body")
        out.append(AppRequest(op, rid, mv[pos + APP_REQUEST_SIZE:stop], mv[pos:stop]))
        pos = stop
    return out


class MessageReassembler:
    """Accumulates an in-order byte stream and yields whole client messages."""

    def __init__(self, max_message: int = 1 << 24) -> None:
        self._buf = bytearray()
        self.max_message = max_message

    def feed(self, data) -> list[tuple[int, memoryview]]:
        """Append bytes; return ``(request_count, payload)`` for each complete message."""
        self._buf += data
        out = []
        pos = 0
        buf = self._buf
        n = len(buf)
        while n - pos >= MESSAGE_HEADER_SIZE:
            length, count, _ = MESSAGE_HEADER.unpack_from(buf, pos)
            if length > self.max_message or count == 0:
                raise DDSError(Status.LENGTH_MISMATCH, f"bad framing length={length} count={count}")
            stop = pos + MESSAGE_HEADER_SIZE + length
            if stop > n:
                break
            out.append((count, memoryview(bytes(buf[pos + MESSAGE_HEADER_SIZE:stop]))))
            pos = stop
        if pos:
            del buf[:pos]
        return out

    def pending(self) -> int:
        return len(self._buf)


def encode_app_response(request_id: int, status: int, data=b"") -> bytes:
    return APP_RESPONSE.pack(request_id, status, 0, 0, len(data)) + bytes(data)


class ResponseReassembler:
    """Splits an in-order byte stream into whole application response records."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data) -> list[bytes]:
        self._buf += data
        out = []
        pos = 0
        buf = self._buf
        n = len(buf)
        while n - pos >= APP_RESPONSE_SIZE:
            dlen = APP_RESPONSE.unpack_from(buf, pos)[4]
            stop = pos + APP_RESPONSE_SIZE + dlen
            if stop > n:
                break
            out.append(bytes(buf[pos:stop]))
            pos = stop
        if pos:
            del buf[:pos]
        return out


def parse_app_response(record) -> tuple[int, int, memoryview]:
    rid, status, _f, _r, dlen = APP_RESPONSE.unpack_from(record, 0)
    return rid, status, memoryview(record)[APP_RESPONSE_SIZE:APP_RESPONSE_SIZE + dlen]


def iter_records(buf, decode=decode_request) -> Iterable:
    """Decode back-to-back records until ``buf`` is exhausted."""
    pos = 0
    n = len(buf)
    while pos < n:
        hdr, payload, used = decode(buf, pos)
        yield hdr, payload
        pos += used
