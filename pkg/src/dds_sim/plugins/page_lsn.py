"""Page server with GetPage@LSN reads: the DPU serves a page when its cached
LSN is at least the one requested."""
from __future__ import annotations

import hashlib
import struct
from collections import OrderedDict
from typing import Optional

from dds_sim.errors import Status
from dds_sim.plugins.base import DECLINE, HostApp, OffloadPlugin, ReadOp, WriteOp, register
from dds_sim.wire import AppRequest

OP_GETPAGE = 1
OP_APPLY = 2

PAGE_SIZE = 8192
PAGE_HEADER = struct.Struct("<QQ")        # page id, lsn
BODY = struct.Struct("<QQ")               # page id, lsn
PAGE_KEY = struct.Struct("<Q")
ITEM = struct.Struct("<QIQ")              # lsn, file id, file offset


def lsn_offloadable(cached_lsn: Optional[int], requested_lsn: int) -> bool:
    """Serve from the DPU only if the stored page is at least as new as asked."""
    return cached_lsn is not None and cached_lsn >= requested_lsn


def make_page(page_id: int, lsn: int, page_size: int = PAGE_SIZE) -> bytes:
    seed = hashlib.blake2b(PAGE_HEADER.pack(page_id, lsn), digest_size=64).digest()
    body = page_size - PAGE_HEADER.size
    return PAGE_HEADER.pack(page_id, lsn) + (seed * (body // 64 + 1))[:body]


def cached_lsn(table, page_id: int) -> Optional[int]:
    item = table.lookup(PAGE_KEY.pack(page_id))
    return None if item is None else ITEM.unpack(item)[0]


@register
class PageLSNPlugin(OffloadPlugin):
    name = "page_lsn"

    def __init__(self, page_size: int = PAGE_SIZE) -> None:
        self.page_size = page_size

    def off_pred(self, msg, table):
        host, dpu = [], []
        for req in msg:
            if req.op == OP_GETPAGE:
                pid, lsn = BODY.unpack_from(req.body, 0)
                if lsn_offloadable(cached_lsn(table, pid), lsn):
                    dpu.append(req)
                    continue
            host.append(req)
        return host, dpu

    def off_func(self, req, table):
        if req.op != OP_GETPAGE:
            return DECLINE
        pid, lsn = BODY.unpack_from(req.body, 0)
        item = table.lookup(PAGE_KEY.pack(pid))
        if item is None:
            return DECLINE
        have, fid, off = ITEM.unpack(item)
        if not lsn_offloadable(have, lsn):
            return DECLINE
        return ReadOp(fid, off, self.page_size)

    def cache(self, op: WriteOp):
        ps = self.page_size
        keys, items = [], []
        if op.offset % ps:
            return keys, items
        data = op.data
        for at in range(0, len(data) - ps + 1, ps):
            pid, lsn = PAGE_HEADER.unpack_from(data, at)
            if pid * ps != op.offset + at:
                continue
            keys.append(PAGE_KEY.pack(pid))
            items.append(ITEM.pack(lsn, op.file_id, op.offset + at))
        return keys, items

    def invalidate(self, op: ReadOp):
        ps = self.page_size
        first = op.offset // ps
        last = -(-(op.offset + op.size) // ps)
        return [PAGE_KEY.pack(p) for p in range(first, last)]


class PageServer(HostApp):
    """Host side: pages on a file plus a bounded LRU of pages being modified.

    APPLY brings a page into host memory (the read invalidates the DPU
    entry) and bumps its LSN.  Evicted pages are written back, which makes
    them offloadable again at their new LSN.
    """

    def __init__(self, pages: int, page_size: int = PAGE_SIZE, cache_pages: int = 64) -> None:
        super().__init__()
        self.pages = pages
        self.page_size = page_size
        self.cache_pages = cache_pages
        self.cache: OrderedDict[int, bytes] = OrderedDict()
        self.loading: dict[int, list] = {}
        self.flushing: dict[int, bytes] = {}
        self.writebacks = 0

    def setup(self) -> None:
        d = self.fs.create_directory("pages")
        self.handle_ = self.fs.create_file(d, "data")
        self.fs.poll_add(self.group, self.handle_)

    def load_requests(self):
        return []

    def initial_pages(self):
        """(offset, bytes) for every page at LSN 1, written before the run."""
        ps = self.page_size
        return [(p * ps, make_page(p, 1, ps)) for p in range(self.pages)]

    def handle(self, req: AppRequest, reply) -> None:
        rid = req.request_id
        if req.op not in (OP_GETPAGE, OP_APPLY):
            reply(rid, Status.BAD_OP_KIND, b"")
            return
        pid, lsn = BODY.unpack_from(req.body, 0)
        if pid >= self.pages:
            reply(rid, Status.OUT_OF_RANGE, b"")
            return

        def fail(status):
            reply(rid, status, b"")

        if req.op == OP_GETPAGE:
            self._with_page(pid, lambda page: reply(rid, Status.SUCCESS, page), fail)
            return

        def apply(page):
            if lsn > PAGE_HEADER.unpack_from(page, 0)[1]:
                self.cache[pid] = make_page(pid, lsn, self.page_size)
            reply(rid, Status.SUCCESS, b"")
        self._with_page(pid, apply, fail)

    def _with_page(self, pid: int, fn, fail) -> None:
        cache = self.cache
        if pid not in cache and pid in self.flushing:
            cache[pid] = self.flushing[pid]
        if pid in cache:
            cache.move_to_end(pid)
            fn(cache[pid])
            self._evict()
            return
        if pid in self.loading:
            self.loading[pid].append((fn, fail))
            return
        self.loading[pid] = [(fn, fail)]
        buf = bytearray(self.page_size)

        def done(c):
            waiters = self.loading.pop(pid)
            if c.status is not Status.SUCCESS:
                for _, on_error in waiters:
                    on_error(c.status)
                return
            cache[pid] = bytes(buf)
            for on_page, _ in waiters:
                on_page(cache[pid])
            self._evict()

        self.issue(self.fs.read_file(self.handle_, pid * self.page_size, self.page_size, buf), done)

    def _evict(self) -> None:
        while len(self.cache) > self.cache_pages:
            pid, page = self.cache.popitem(last=False)
            self.writebacks += 1
            self.flushing[pid] = page

            def flushed(c, pid=pid, page=page):
                if self.flushing.get(pid) is page:
                    del self.flushing[pid]
            self.issue(self.fs.write_file(self.handle_, pid * self.page_size, page), flushed)
