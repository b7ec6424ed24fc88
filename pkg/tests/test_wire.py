import math
import random

import pytest
from hypothesis import given, strategies as st

from dds_sim.errors import DDSError, Status
from dds_sim.wire import (FileRequestHeader, FileResponseHeader, FiveTuple, MessageReassembler,
                          OpKind, ResponseReassembler, decode_request, decode_response,
                          encode_app_request, encode_app_response, encode_message,
                          encode_request, encode_response, iter_records, match_signature,
                          parse_app_response, parse_signature, split_message)


def oracle_request(rid, op, fid, off, length, payload=b""):
    """Byte-by-byte layout: id@0 u64, op@8 u8, pad, file@12 u32, offset@16 u64,
    length@24 u32, total@28 u32, payload@32, zero fill to a 64-byte multiple."""
    inline = length if op in (OpKind.WRITE, OpKind.WRITE_GATHER, OpKind.MESSAGE) else 0
    total = math.ceil((32 + inline) / 64) * 64
    out = bytearray(total)
    out[0:8] = rid.to_bytes(8, "little")
    out[8] = int(op)
    out[12:16] = fid.to_bytes(4, "little")
    out[16:24] = off.to_bytes(8, "little")
    out[24:28] = length.to_bytes(4, "little")
    out[28:32] = total.to_bytes(4, "little")
    out[32:32 + len(payload)] = payload
    return bytes(out)


def test_read_request_is_header_only():
    rec = encode_request(FileRequestHeader(1, OpKind.READ, 3, 4096, 1024))
    assert len(rec) == 64
    hdr, payload, used = decode_request(rec)
    assert (hdr.file_id, hdr.offset, hdr.length, used, len(payload)) == (3, 4096, 1024, 64, 0)


def test_empty_write_round_trips():
    h = FileRequestHeader(9, OpKind.WRITE, 0, 0, 0)
    rec = encode_request(h, b"")
    assert len(rec) == 64
    assert decode_request(rec)[0] == h


def test_random_requests_match_layout_oracle():
    rng = random.Random(1)
    for _ in range(10_000):
        op = rng.choice([OpKind.READ, OpKind.WRITE, OpKind.READ_SCATTER, OpKind.WRITE_GATHER])
        length = rng.randrange(0, 3000)
        payload = rng.randbytes(length) if op in (OpKind.WRITE, OpKind.WRITE_GATHER) else b""
        rid, fid, off = rng.getrandbits(64), rng.getrandbits(32), rng.getrandbits(63)
        h = FileRequestHeader(rid, op, fid, off, length)
        rec = encode_request(h, payload)
        assert rec == oracle_request(rid, op, fid, off, length, payload)
        got, body, used = decode_request(rec)
        assert got == h and bytes(body) == payload and used == len(rec)


def test_truncated_record():
    rec = encode_request(FileRequestHeader(1, OpKind.WRITE, 7, 512, 100), bytes(100))
    with pytest.raises(DDSError) as e:
        decode_request(rec[:100])
    assert e.value.status is Status.TRUNCATED
    with pytest.raises(DDSError) as e:
        decode_request(rec[:10])
    assert e.value.status is Status.TRUNCATED


def test_batch_of_three_decodes_exactly():
    rng = random.Random(2)
    parts, headers = [], []
    for i in range(3):
        n = rng.randrange(1, 500)
        h = FileRequestHeader(i, OpKind.WRITE, i, i * 10, n)
        headers.append(h)
        parts.append(encode_request(h, rng.randbytes(n)))
    batch = b"".join(parts)
    got = [h for h, _ in iter_records(batch)]
    assert got == headers


def test_bad_op_and_length_mismatch():
    rec = bytearray(encode_request(FileRequestHeader(1, OpKind.READ, 0, 0, 8)))
    rec[8] = 99
    with pytest.raises(DDSError) as e:
        decode_request(rec)
    assert e.value.status is Status.BAD_OP_KIND
    with pytest.raises(DDSError) as e:
        encode_request(FileRequestHeader(1, OpKind.WRITE, 0, 0, 10), b"abc")
    assert e.value.status is Status.LENGTH_MISMATCH


def test_response_round_trip():
    h = FileResponseHeader(5, Status.SUCCESS, 3, 64)
    rec = encode_response(h, b"xyz")
    got, data, used = decode_response(rec)
    assert got == h and bytes(data) == b"xyz" and used == 64


SIG = parse_signature("[* : *, 10.10.1.1 : 1111, TCP]")


def test_signature_matches_any_client():
    assert match_signature(SIG, FiveTuple("9.9.9.9", 5000, "10.10.1.1", 1111))


def test_signature_port_and_protocol_mismatch():
    assert not match_signature(SIG, FiveTuple("9.9.9.9", 5000, "10.10.1.1", 2222))
    assert not match_signature(SIG, FiveTuple("9.9.9.9", 5000, "10.10.1.1", 1111, "UDP"))


def test_signature_with_concrete_client():
    sig = parse_signature("[1.2.3.4:77, 10.10.1.1:1111, TCP]")
    assert match_signature(sig, FiveTuple("1.2.3.4", 77, "10.10.1.1", 1111))
    assert not match_signature(sig, FiveTuple("1.2.3.4", 78, "10.10.1.1", 1111))


@pytest.mark.parametrize("text", ["[*:*, *:1111, TCP]", "[*:*, 10.0.0.1:99999, TCP]",
                                  "nonsense", "[*:*, 10.0.0.1:1, SCTP]"])
def test_bad_signatures_rejected(text):
    with pytest.raises(ValueError):
        parse_signature(text)


@given(st.lists(st.tuples(st.integers(1, 3), st.integers(0, 2**64 - 1), st.binary(max_size=200)),
                min_size=1, max_size=20),
       st.lists(st.integers(1, 50), max_size=30))
def test_message_reassembly_any_split(reqs, cuts):
    msg = encode_message([encode_app_request(op, rid, body) for op, rid, body in reqs])
    stream = msg + msg
    r = MessageReassembler()
    got, at = [], 0
    for c in cuts:
        got += r.feed(stream[at:at + c])
        at = min(at + c, len(stream))
    got += r.feed(stream[at:])
    assert len(got) == 2 and r.pending() == 0
    for count, payload in got:
        parsed = split_message(payload)
        assert count == len(reqs)
        assert [(p.op, p.request_id, bytes(p.body)) for p in parsed] == reqs


@given(st.lists(st.tuples(st.integers(0, 2**64 - 1), st.binary(max_size=300)), min_size=1,
                max_size=10), st.integers(1, 64))
def test_response_reassembly(responses, chunk):
    stream = b"".join(encode_app_response(rid, 0, data) for rid, data in responses)
    r = ResponseReassembler()
    got = []
    for i in range(0, len(stream), chunk):
        got += r.feed(stream[i:i + chunk])
    assert [(parse_app_response(g)[0], bytes(parse_app_response(g)[2])) for g in got] == responses
