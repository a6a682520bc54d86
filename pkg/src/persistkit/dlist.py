"""Doubly linked list that persists only each node's value and forward link.

Node slot (128 bytes, 64-aligned)::

    0..56    value payload (persistent)
    56..64   next offset   (persistent)   (end of the first cache line)
    64..72   prev offset   (written only in FULL mode)

The backward links, the tail handle and the length live in volatile memory and
are rebuilt by one forward pass after a crash.
"""
from __future__ import annotations

import random
import struct
from typing import Iterator

import numpy as np

from .errors import AlreadyInitialized, CorruptionError, KeyNotFound, NotInitialized, UnsupportedOperation
from .region import LINE, NIL, Arena, PersistentRegion
from .staging import Mode, io_for, pack_payload

SLOT = 128
VALUE_SIZE = 56
NEXT_OFF = 56
PREV_OFF = 64

_U64 = struct.Struct("<Q")
_HEADER = struct.Struct("<QB")

LIST_BUGS = ("SelfLoopNext", "ScrambledPrev", "DanglingTail")


def arena_lengths(max_nodes: int) -> dict[Arena, int]:
    return {Arena.LIST_NODES: max(1, max_nodes) * SLOT}


class RecoverableList:
    def __init__(self, region: PersistentRegion, mode: Mode):
        self.region = region
        self.mode = mode
        self.io = io_for(region, mode)
        self._hdr = region.arena(Arena.LIST_HEADER).base
        nodes = region.arena(Arena.LIST_NODES)
        self._base = nodes.base
        self._slots = nodes.length // SLOT
        self.head = NIL
        self.tail = NIL
        self.length = 0
        self.prev: dict[int, int] = {}

    @classmethod
    def create(cls, region: PersistentRegion, mode: Mode = Mode.PARTLY) -> RecoverableList:
        if region.init_flag(Arena.LIST_HEADER):
            raise AlreadyInitialized("list already initialised in this region")
        lst = cls(region, mode)
        lst.io.write(lst._hdr, _HEADER.pack(NIL, mode.code))
        lst.io.flush(lst._hdr, LINE)
        lst.io.fence()
        # the flag goes durable only after the header it vouches for
        region.set_init_flag(Arena.LIST_HEADER)
        return lst

    def __len__(self) -> int:
        return self.length

    def append(self, value: int | bytes) -> int:
        io = self.io
        node = self.region.alloc(Arena.LIST_NODES, SLOT, LINE)
        io.write(node, pack_payload(value, VALUE_SIZE) + _U64.pack(NIL))
        io.flush(node, LINE)
        tail = self.tail
        if self.mode is Mode.FULL:
            io.write(node + PREV_OFF, _U64.pack(tail))
            io.flush(node + PREV_OFF, 8)
        # the new node is flushed before anything links to it
        if tail == NIL:
            io.write(self._hdr, _U64.pack(node))
            io.flush(self._hdr, 8)
            self.head = node
        else:
            io.write(tail + NEXT_OFF, _U64.pack(node))
            io.flush(tail + NEXT_OFF, 8)
        self.prev[node] = tail
        self.tail = node
        self.length += 1
        io.end_op()
        return node

    def delete(self, node: int) -> None:
        try:
            pred = self.prev[node]
        except KeyError:
            raise KeyNotFound(f"node {node} is not in the list") from None
        io = self.io
        succ = io.read_u64(node + NEXT_OFF)
        if pred == NIL:
            io.write(self._hdr, _U64.pack(succ))
            io.flush(self._hdr, 8)
            self.head = succ
        else:
            io.write(pred + NEXT_OFF, _U64.pack(succ))
            io.flush(pred + NEXT_OFF, 8)
        if succ == NIL:
            self.tail = pred
        else:
            self.prev[succ] = pred
            if self.mode is Mode.FULL:
                io.write(succ + PREV_OFF, _U64.pack(pred))
                io.flush(succ + PREV_OFF, 8)
        del self.prev[node]
        self.length -= 1
        self.region.free(Arena.LIST_NODES, node, SLOT)
        io.end_op()

    def value(self, node: int) -> bytes:
        return self.io.read(node, VALUE_SIZE)

    def next_of(self, node: int) -> int:
        return self.io.read_u64(node + NEXT_OFF)

    def nodes(self, limit: int | None = None) -> Iterator[int]:
        """Forward traversal over persistent next links."""
        cur = self.io.read_u64(self._hdr)
        steps = 0
        limit = self._slots if limit is None else limit
        while cur != NIL:
            if steps >= limit:
                raise CorruptionError("forward traversal exceeded slot capacity")
            yield cur
            steps += 1
            cur = self.io.read_u64(cur + NEXT_OFF)

    def nodes_backward(self) -> Iterator[int]:
        cur = self.tail
        steps = 0
        while cur != NIL:
            if steps >= self._slots:
                raise CorruptionError("backward traversal exceeded slot capacity")
            yield cur
            steps += 1
            cur = self.prev[cur]

    def values(self) -> list[bytes]:
        return [self.value(n) for n in self.nodes()]

    def __iter__(self) -> Iterator[bytes]:
        return (self.value(n) for n in self.nodes())

    @classmethod
    def reconstruct(cls, region: PersistentRegion, mode: Mode | None = None) -> RecoverableList:
        """Single forward pass from head: restores prev links, tail, length and the free list."""
        if not region.init_flag(Arena.LIST_HEADER):
            raise NotInitialized("list init flag is clear")
        hdr = region.arena(Arena.LIST_HEADER).base
        head, code = _HEADER.unpack(region.read(hdr, _HEADER.size))
        lst = cls(region, mode or Mode.from_code(code))
        base, slots = lst._base, lst._slots
        view = region.view
        column = np.frombuffer(view, dtype="<u8", count=slots * (SLOT // 8), offset=base)
        rel = column[NEXT_OFF // 8 :: SLOT // 8].astype(np.int64) - base
        del column, view
        # successor slot index per slot: -1 for NIL, -2 for a link that is not a slot
        ok = (rel >= 0) & (rel < slots * SLOT) & (rel % SLOT == 0)
        succ = np.where(rel == NIL - base, -1, np.where(ok, rel // SLOT, -2)).tolist()
        if head == NIL:
            i = -1
        elif (head - base) % SLOT or not 0 <= head - base < slots * SLOT:
            raise CorruptionError(f"head {head} is not a node slot")
        else:
            i = (head - base) // SLOT
        chain: list[int] = []
        append = chain.append
        for _ in range(slots + 1):
            if i < 0:
                break
            append(i)
            i = succ[i]
        else:
            raise CorruptionError("forward cycle in the node chain")
        if i == -2:
            raise CorruptionError(f"node {base + chain[-1] * SLOT} links outside the node arena")
        idx = np.asarray(chain, dtype=np.int64)
        marks = np.zeros(slots, dtype=np.uint8)
        marks[idx] = 1
        if int(marks.sum()) != len(chain):
            raise CorruptionError("forward cycle in the node chain")
        order = (idx * SLOT + base).tolist()
        lst.prev = dict(zip(order, [NIL, *order[:-1]]))
        lst.head, lst.tail, lst.length = head, (order[-1] if order else NIL), len(order)

        used = np.flatnonzero(marks)
        used_end = int(used[-1]) + 1 if used.size else 0
        free = (np.flatnonzero(marks[:used_end] == 0) * SLOT + base).tolist()
        region.rebuild_allocator(Arena.LIST_NODES, base + used_end * SLOT, SLOT, free)

        if lst.mode is Mode.FULL:
            lst._repair_prev()
        return lst

    def _repair_prev(self) -> None:
        io = self.io
        touched = False
        for node, before in self.prev.items():
            if io.read_u64(node + PREV_OFF) != before:
                io.write(node + PREV_OFF, _U64.pack(before))
                io.flush(node + PREV_OFF, 8)
                touched = True
        if touched:
            io.fence()

    def inject_bug(self, bug: str, rng: random.Random) -> None:
        """Corrupt volatile or staged state only; nothing is flushed."""
        if self.mode is not Mode.PARTLY_CKPT:
            raise UnsupportedOperation("bug injection needs checkpoint mode; direct modes write through")
        live = list(self.prev)
        if bug == "SelfLoopNext":
            if not live:
                return
            node = rng.choice(live)
            self.io.write(node + NEXT_OFF, _U64.pack(node))
        elif bug == "ScrambledPrev":
            targets = live + [NIL]
            for node in live:
                self.prev[node] = rng.choice(targets)
        elif bug == "DanglingTail":
            slots = [self._base + i * SLOT for i in range(max(2, self._slots))]
            self.tail = rng.choice([s for s in slots if s != self.tail])
        else:
            raise UnsupportedOperation(f"bug {bug!r} does not apply to the list")
