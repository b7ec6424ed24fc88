"""Fixed-capacity cuckoo hash table with in-bucket chaining.

One writer (the file service hooks) and any number of readers (director and
engine).  Every bucket carries a version counter the writer makes odd while
it edits the bucket; readers retry if a version moved or was odd, so they
see either the old or the new state of any single insert or delete.
Displacements copy an entry into its alternate bucket before removing it
from the old one, so a concurrent reader never misses a resident key.
"""
from __future__ import annotations

import hashlib
import random
from typing import Optional

from dds_sim.errors import DDSError, Status

BUCKET_WIDTH = 4
CHAIN_LIMIT = 4
KICK_LIMIT = 32
MAX_KEY = 64
MAX_ITEM = 64


class CacheTable:
    def __init__(self, capacity: int, bucket_width: int = BUCKET_WIDTH,
                 chain_limit: int = CHAIN_LIMIT, kick_limit: int = KICK_LIMIT,
                 seed: int = 0, max_key: int = MAX_KEY, max_item: int = MAX_ITEM) -> None:
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.width = bucket_width
        self.chain_limit = chain_limit
        self.kick_limit = kick_limit
        self.max_key = max_key
        self.max_item = max_item
        self.nbuckets = max(2, -(-capacity // bucket_width))
        # fixed at construction; a tuple so nothing can grow the bucket array
        self._buckets: tuple = tuple([] for _ in range(self.nbuckets))
        self._versions = [0] * self.nbuckets
        self._salt = seed.to_bytes(8, "little", signed=True)
        self._rng = random.Random(seed)
        self.count = 0
        self.lookups = 0
        self.probes = 0
        self.max_probes = 0
        self.kicks = 0
        self.chained = 0
        self.table_full = 0

    @property
    def resizes(self) -> int:
        """Always zero: the bucket array is never reallocated."""
        return 0

    def __len__(self) -> int:
        return self.count

    def load_factor(self) -> float:
        return self.count / self.capacity

    def candidates(self, key: bytes) -> tuple[int, int]:
        d = hashlib.blake2b(key, digest_size=16, salt=self._salt).digest()
        n = self.nbuckets
        b1 = int.from_bytes(d[:8], "little") % n
        b2 = int.from_bytes(d[8:], "little") % n
        if b2 == b1:
            b2 = (b1 + 1) % n
        return b1, b2

    # -- readers ---------------------------------------------------------------

    def lookup(self, key: bytes) -> Optional[bytes]:
        """The item stored under ``key``, or ``None`` on a miss."""
        b1, b2 = self.candidates(key)
        buckets, vers = self._buckets, self._versions
        while True:
            v1, v2 = vers[b1], vers[b2]
            if (v1 | v2) & 1:
                continue
            touched = 1
            found = _find(buckets[b1], key)
            if found is None:
                touched = 2
                found = _find(buckets[b2], key)
            if vers[b1] == v1 and vers[b2] == v2:
                break
        self.lookups += 1
        self.probes += touched
        if touched > self.max_probes:
            self.max_probes = touched
        return found

    def __contains__(self, key: bytes) -> bool:
        return self.lookup(key) is not None

    # -- writer ----------------------------------------------------------------

    def insert(self, key: bytes, item: bytes) -> Status:
        """Insert or overwrite; TABLE_FULL when no slot can be found (never evicts)."""
        key = bytes(key)
        item = bytes(item)
        if len(key) > self.max_key or len(item) > self.max_item:
            raise DDSError(Status.RECORD_TOO_LARGE, "key or item exceeds configured maximum")
        b1, b2 = self.candidates(key)
        buckets = self._buckets
        for b in (b1, b2):
            bucket = buckets[b]
            for i, (k, _) in enumerate(bucket):
                if k == key:
                    self._begin(b)
                    bucket[i] = (key, item)
                    self._end(b)
                    return Status.SUCCESS
        if self.count >= self.capacity:
            self.table_full += 1
            return Status.TABLE_FULL
        w = self.width
        for b in (b1, b2):
            if len(buckets[b]) < w:
                self._append(b, key, item)
                return Status.SUCCESS
        path = self._find_path(b1, b2)
        if path is not None:
            self._apply_path(path)
            self._append(path[0][0], key, item)
            return Status.SUCCESS
        limit = w + self.chain_limit
        b = b1 if len(buckets[b1]) <= len(buckets[b2]) else b2
        if len(buckets[b]) < limit:
            self._append(b, key, item)
            self.chained += 1
            return Status.SUCCESS
        self.table_full += 1
        return Status.TABLE_FULL

    def delete(self, key: bytes) -> Status:
        key = bytes(key)
        for b in self.candidates(key):
            bucket = self._buckets[b]
            for i, (k, _) in enumerate(bucket):
                if k == key:
                    self._begin(b)
                    del bucket[i]
                    self._end(b)
                    self.count -= 1
                    return Status.SUCCESS
        return Status.NOT_FOUND

    def items(self):
        for bucket in self._buckets:
            yield from list(bucket)

    def _begin(self, b: int) -> None:
        self._versions[b] += 1

    def _end(self, b: int) -> None:
        self._versions[b] += 1

    def _append(self, b: int, key: bytes, item: bytes) -> None:
        self._begin(b)
        self._buckets[b].append((key, item))
        self._end(b)
        self.count += 1

    def _find_path(self, b1: int, b2: int) -> Optional[list]:
        """Random-walk for a chain of displacements ending at a bucket with room.

        Returns ``[(bucket, key), ..., (free_bucket, None)]``: each key moves
        to the next step's bucket.  Nothing is modified while searching.
        """
        buckets, w = self._buckets, self.width
        rng = self._rng
        b = b1 if rng.random() < 0.5 else b2
        path: list = []
        seen = set()
        for _ in range(self.kick_limit):
            key = buckets[b][rng.randrange(min(len(buckets[b]), w))][0]
            if key in seen:
                return None
            seen.add(key)
            path.append((b, key))
            c1, c2 = self.candidates(key)
            alt = c2 if c1 == b else c1
            if len(buckets[alt]) < w:
                path.append((alt, None))
                return path
            b = alt
        return None

    def _apply_path(self, path: list) -> None:
        """Execute displacements from the free end backwards (copy, then remove)."""
        buckets = self._buckets
        for i in range(len(path) - 2, -1, -1):
            src, key = path[i]
            dst = path[i + 1][0]
            bucket = buckets[src]
            at = next(j for j, e in enumerate(bucket) if e[0] == key)
            self._begin(dst)
            buckets[dst].append(bucket[at])
            self._end(dst)
            self._begin(src)
            del bucket[at]
            self._end(src)
            self.kicks += 1


def _find(bucket: list, key: bytes) -> Optional[bytes]:
    for k, v in bucket:
        if k == key:
            return v
    return None
