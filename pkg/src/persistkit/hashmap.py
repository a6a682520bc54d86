"""Separate-chaining hashmap persisting only entry (key, value) pairs and the size.

Entry slot (128 bytes, 64-aligned)::

    0..8     key (persistent; 0 is the sentinel for an empty slot)
    8..64    value payload (persistent)   (end of the first cache line)
    64..68   hash cache (written only in FULL mode)
    72..80   next offset (written only in FULL mode)

Header block: size u64 @0, bucket count u64 @8 (FULL only), mode u8 @16.
Bucket heads live in the MAP_BUCKETS arena only in FULL mode.
"""
from __future__ import annotations

import random
import struct
from typing import Iterator

import numpy as np

from .errors import (
    AlreadyInitialized,
    CorruptionError,
    InvalidKeyError,
    KeyNotFound,
    NotInitialized,
    OutOfSpaceError,
    UnsupportedOperation,
)
from .region import LINE, NIL, Arena, PersistentRegion
from .staging import Mode, io_for, pack_payload

SLOT = 128
VALUE_SIZE = 56
SENTINEL = 0
LOAD_FACTOR = 0.75

_KEY_OFF = 0
_VALUE_OFF = 8
_LINK_OFF = 64
_NEXT_OFF = 72

_U64 = struct.Struct("<Q")
_I64 = struct.Struct("<q")
_LINK = struct.Struct("<I4xQ")
_HEADER = struct.Struct("<QQB")

_M64 = (1 << 64) - 1
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

MAP_BUGS = ("SelfLoopNext", "WrongHashCache", "DanglingTail")


def hash_key(key: int) -> int:
    """splitmix64 finaliser, truncated to 32 bits."""
    z = key & _M64
    z = ((z ^ (z >> 30)) * _MIX1) & _M64
    z = ((z ^ (z >> 27)) * _MIX2) & _M64
    z ^= z >> 31
    return z & 0xFFFFFFFF


def hash_keys(keys: np.ndarray) -> np.ndarray:
    """Vectorised :func:`hash_key`; bit-identical for every int64 key."""
    z = keys.astype(np.int64).view(np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    z ^= z >> np.uint64(31)
    return (z & np.uint64(0xFFFFFFFF)).astype(np.int64)


def bucket_count_for(size: int, load_factor: float = LOAD_FACTOR) -> int:
    """Smallest power of two ``b`` with ``size <= load_factor * b``."""
    b = 1
    while size > load_factor * b:
        b <<= 1
    return b


def arena_lengths(max_entries: int, mode: Mode, load_factor: float = LOAD_FACTOR) -> dict[Arena, int]:
    lengths = {Arena.MAP_ENTRIES: max(1, max_entries) * SLOT}
    if mode is Mode.FULL:
        lengths[Arena.MAP_BUCKETS] = 2 * bucket_count_for(max_entries + 1, load_factor) * 8
    return lengths


class RecoverableHashMap:
    def __init__(self, region: PersistentRegion, mode: Mode, load_factor: float = LOAD_FACTOR):
        if not 0 < load_factor <= 1:
            raise ValueError(f"load factor {load_factor} outside (0, 1]")
        self.region = region
        self.mode = mode
        self.io = io_for(region, mode)
        self.load_factor = load_factor
        self._hdr = region.arena(Arena.MAP_HEADER).base
        entries = region.arena(Arena.MAP_ENTRIES)
        self._base = entries.base
        self._slots = entries.length // SLOT
        buckets = region.arena(Arena.MAP_BUCKETS)
        self._bbase = buckets.base
        self._bmax = buckets.length // 8
        self.size = 0
        self.bucket_count = 1
        self.buckets: list[int] = [NIL]
        self.next: dict[int, int] = {}
        self.hashes: dict[int, int] = {}

    @classmethod
    def create(
        cls,
        region: PersistentRegion,
        initial_capacity: int = 16,
        mode: Mode = Mode.PARTLY,
        load_factor: float = LOAD_FACTOR,
    ) -> RecoverableHashMap:
        if region.init_flag(Arena.MAP_HEADER):
            raise AlreadyInitialized("hashmap already initialised in this region")
        m = cls(region, mode, load_factor)
        m.bucket_count = bucket_count_for(initial_capacity, load_factor)
        m.buckets = [NIL] * m.bucket_count
        if mode is Mode.FULL:
            m._write_bucket_array()
        m.io.write(m._hdr, _HEADER.pack(0, m.bucket_count if mode is Mode.FULL else 0, mode.code))
        m.io.flush(m._hdr, LINE)
        m.io.fence()
        region.set_init_flag(Arena.MAP_HEADER)
        return m

    def __len__(self) -> int:
        return self.size

    def _lookup(self, key: int) -> tuple[int, int, int]:
        """(bucket index, predecessor, entry) with entry NIL when absent; predecessor is the chain tail then."""
        h = hash_key(key)
        b = h % self.bucket_count
        read = self.io.read_i64
        nxt = self.next
        before, cur = NIL, self.buckets[b]
        steps = 0
        while cur != NIL:
            if read(cur) == key:
                return b, before, cur
            before, cur = cur, nxt[cur]
            steps += 1
            if steps > self._slots:
                raise CorruptionError(f"chain cycle in bucket {b}")
        return b, before, NIL

    def get(self, key: int) -> bytes | None:
        if key == SENTINEL:
            return None
        _, _, e = self._lookup(key)
        return None if e == NIL else self.io.read(e + _VALUE_OFF, VALUE_SIZE)

    def __contains__(self, key: int) -> bool:
        return self.get(key) is not None

    def put(self, key: int, value: int | bytes) -> None:
        if key == SENTINEL:
            raise InvalidKeyError("key 0 is reserved as the empty-slot sentinel")
        if not -(1 << 63) <= key < (1 << 63):
            raise InvalidKeyError(f"key {key} does not fit in 64 bits")
        io = self.io
        payload = pack_payload(value, VALUE_SIZE)
        b, tail, e = self._lookup(key)
        if e != NIL:
            io.write(e + _VALUE_OFF, payload)
            io.flush(e + _VALUE_OFF, VALUE_SIZE)
            io.end_op()
            return
        full = self.mode is Mode.FULL
        e = self.region.alloc(Arena.MAP_ENTRIES, SLOT, LINE)
        io.write(e, _I64.pack(key) + payload)
        io.flush(e, LINE)
        h = hash_key(key)
        if full:
            io.write(e + _LINK_OFF, _LINK.pack(h, NIL))
            io.flush(e + _LINK_OFF, 16)
        if tail == NIL:
            self.buckets[b] = e
            if full:
                self._persist_bucket(b)
        else:
            self.next[tail] = e
            if full:
                io.write(tail + _NEXT_OFF, _U64.pack(e))
                io.flush(tail + _NEXT_OFF, 8)
        self.next[e] = NIL
        self.hashes[e] = h
        self.size += 1
        io.write(self._hdr, _U64.pack(self.size))
        io.flush(self._hdr, 8)
        if self.size > self.load_factor * self.bucket_count:
            self._resize(self.bucket_count * 2)
        io.end_op()

    def remove(self, key: int) -> None:
        if key == SENTINEL:
            raise KeyNotFound(key)
        b, before, e = self._lookup(key)
        if e == NIL:
            raise KeyNotFound(key)
        io = self.io
        full = self.mode is Mode.FULL
        # invalidate first: a crash before the size update over-counts and is caught on recovery
        io.write(e + _KEY_OFF, _I64.pack(SENTINEL))
        io.flush(e + _KEY_OFF, 8)
        succ = self.next.pop(e)
        if before == NIL:
            self.buckets[b] = succ
            if full:
                self._persist_bucket(b)
        else:
            self.next[before] = succ
            if full:
                io.write(before + _NEXT_OFF, _U64.pack(succ))
                io.flush(before + _NEXT_OFF, 8)
        del self.hashes[e]
        self.size -= 1
        io.write(self._hdr, _U64.pack(self.size))
        io.flush(self._hdr, 8)
        self.region.free(Arena.MAP_ENTRIES, e, SLOT)
        io.end_op()

    def _persist_bucket(self, b: int) -> None:
        off = self._bbase + 8 * b
        self.io.write(off, _U64.pack(self.buckets[b]))
        self.io.flush(off, 8)

    def _write_bucket_array(self) -> None:
        if self.bucket_count > self._bmax:
            raise OutOfSpaceError(f"bucket arena holds {self._bmax} buckets, need {self.bucket_count}")
        raw = struct.pack(f"<{self.bucket_count}Q", *self.buckets)
        current = self.io.read(self._bbase, len(raw))
        for start in range(0, len(raw), LINE):
            chunk = raw[start:start + LINE]
            if chunk != current[start:start + LINE]:
                self.io.write(self._bbase + start, chunk)
                self.io.flush(self._bbase + start, len(chunk))

    def _resize(self, new_count: int) -> None:
        """Rehash into ``new_count`` buckets; entries never move in the arena."""
        order = [e for head in self.buckets for e in self._chain(head)]
        self._rechain(order, new_count)
        if self.mode is Mode.FULL:
            self._persist_links(order)
            self._write_bucket_array()
            self.io.write(self._hdr + 8, _U64.pack(new_count))
            self.io.flush(self._hdr + 8, 8)

    def _rechain(self, entries: list[int], count: int) -> None:
        buckets = [NIL] * count
        tails = [NIL] * count
        nxt = self.next
        hashes = self.hashes
        for e in entries:
            b = hashes[e] % count
            t = tails[b]
            if t == NIL:
                buckets[b] = e
            else:
                nxt[t] = e
            tails[b] = e
            nxt[e] = NIL
        self.buckets = buckets
        self.bucket_count = count

    def _persist_links(self, entries: list[int]) -> None:
        io = self.io
        for e in entries:
            raw = _LINK.pack(self.hashes[e], self.next[e])
            if io.read(e + _LINK_OFF, 16) != raw:
                io.write(e + _LINK_OFF, raw)
                io.flush(e + _LINK_OFF, 16)

    def _chain(self, head: int) -> Iterator[int]:
        cur = head
        steps = 0
        while cur != NIL:
            yield cur
            cur = self.next[cur]
            steps += 1
            if steps > self._slots:
                raise CorruptionError("chain cycle")

    def entries(self) -> Iterator[int]:
        for head in self.buckets:
            yield from self._chain(head)

    def items(self) -> Iterator[tuple[int, bytes]]:
        read = self.io.read
        for e in self.entries():
            raw = read(e, LINE)
            yield _I64.unpack_from(raw, 0)[0], raw[_VALUE_OFF:]

    def check_structure(self) -> None:
        """Chain residency, hash caches and size agreement; raises CorruptionError."""
        count = 0
        for b, head in enumerate(self.buckets):
            for e in self._chain(head):
                key = self.io.read_i64(e)
                if key == SENTINEL:
                    raise CorruptionError(f"sentinel entry {e} linked in bucket {b}")
                h = hash_key(key)
                if self.hashes.get(e) != h:
                    raise CorruptionError(f"stale hash cache at entry {e}")
                if h % self.bucket_count != b:
                    raise CorruptionError(f"entry {e} sits in bucket {b}, belongs in {h % self.bucket_count}")
                count += 1
        if count != self.size:
            raise CorruptionError(f"size {self.size} but {count} chained entries")
        if self.io.read_u64(self._hdr) != self.size:
            raise CorruptionError("persistent size disagrees with volatile size")

    @classmethod
    def reconstruct(
        cls,
        region: PersistentRegion,
        load_factor: float = LOAD_FACTOR,
        mode: Mode | None = None,
    ) -> RecoverableHashMap:
        """Rebuild buckets, chains and hash caches from the size field and an arena scan."""
        if not region.init_flag(Arena.MAP_HEADER):
            raise NotInitialized("hashmap init flag is clear")
        hdr = region.arena(Arena.MAP_HEADER).base
        size, _, code = _HEADER.unpack(region.read(hdr, _HEADER.size))
        m = cls(region, mode or Mode.from_code(code), load_factor)
        m.size = size
        count = bucket_count_for(size, load_factor)

        base, slots = m._base, m._slots
        view = region.view
        keys = np.frombuffer(view, dtype="<i8", count=slots * (SLOT // 8), offset=base)[:: SLOT // 8]
        live = np.flatnonzero(keys != SENTINEL)
        if live.size != size:
            raise CorruptionError(f"size field says {size} entries, arena holds {live.size}")
        hashes = hash_keys(keys[live])
        del keys, view
        offsets = (live * SLOT + base).tolist()
        hash_list = hashes.tolist()
        m.hashes = dict(zip(offsets, hash_list))
        m.next = {}
        m._rechain(offsets, count)

        used_end = int(live[-1]) + 1 if live.size else 0
        marks = np.zeros(used_end, dtype=bool)
        marks[live] = True
        free = (np.flatnonzero(~marks) * SLOT + base).tolist()
        region.rebuild_allocator(Arena.MAP_ENTRIES, base + used_end * SLOT, SLOT, free)

        if m.mode is Mode.FULL:
            flushes = region.line_flushes
            m._persist_links(offsets)
            m._write_bucket_array()
            if region.read_u64(hdr + 8) != count:
                m.io.write(hdr + 8, _U64.pack(count))
                m.io.flush(hdr + 8, 8)
            if region.line_flushes != flushes:
                m.io.fence()
        return m

    def inject_bug(self, bug: str, rng: random.Random) -> None:
        """Corrupt volatile state only; nothing is flushed."""
        if self.mode is not Mode.PARTLY_CKPT:
            raise UnsupportedOperation("bug injection needs checkpoint mode; direct modes write through")
        live = list(self.next)
        if not live:
            return
        e = rng.choice(live)
        if bug == "SelfLoopNext":
            self.next[e] = e
        elif bug == "WrongHashCache":
            self.hashes[e] ^= rng.randrange(1, 1 << 32)
        elif bug == "DanglingTail":
            self.next[e] = self._base + rng.randrange(max(1, self._slots)) * SLOT
        else:
            raise UnsupportedOperation(f"bug {bug!r} does not apply to the hashmap")
