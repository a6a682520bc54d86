"""Order-19 B+Tree whose only persistent nodes are the leaves and their records.

Every node is mirrored by a volatile :class:`Node`. Leaves (and, in FULL mode,
internal nodes too) additionally own a 256-byte slot whose image is rewritten
after each operation; only the cache lines whose bytes changed are written and
flushed.

Node image (256 bytes, four cache lines)::

    0        is_leaf u8
    4..8     num_keys u32
    8..16    next leaf offset u64
    16..24   parent offset u64 (FULL mode only)
    24..168  keys, 18 x i64
    168..244 links, 19 x u32 (target offset >> 6)
    244..256 padding

Links are stored as 32-bit line indices: 19 eight-byte pointers next to 18
eight-byte keys would not fit in 256 bytes.

Header block: leftmost leaf u64 @0, root u64 @8 (FULL only), mode u8 @16.
"""
from __future__ import annotations

import math
import random
import struct
from bisect import bisect_left, bisect_right
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import (
    AlreadyInitialized,
    ConfigError,
    CorruptionError,
    DuplicateKeyError,
    KeyNotFound,
    NotInitialized,
    UnsupportedOperation,
)
from .region import LINE, LINE_SHIFT, NIL, Arena, PersistentRegion
from .staging import Mode, io_for, pack_payload

ORDER = 19
MAX_KEYS = ORDER - 1
NODE_SIZE = 256
RECORD_SIZE = 64
MIN_LEAF_KEYS = math.ceil(MAX_KEYS / 2)
MIN_CHILDREN = math.ceil(ORDER / 2)
MIN_INTERNAL_KEYS = MIN_CHILDREN - 1
MAX_BUCKET = ORDER
MIN_BUCKET = ORDER // 2 + 1

_NODE = struct.Struct(f"<B3xIQQ{MAX_KEYS}q{ORDER}I12x")
_HEADER = struct.Struct("<QQB")
_KEYS_AT = 4
_LINKS_AT = 4 + MAX_KEYS
_ZERO_KEYS = [0] * MAX_KEYS
_ZERO_LINKS = [0] * ORDER
_I64_MIN, _I64_MAX = -(1 << 63), (1 << 63) - 1

TREE_BUGS = ("SelfLoopNext", "ScrambledPrev", "DanglingTail")


def arena_lengths(max_keys: int, mode: Mode) -> dict[Arena, int]:
    leaves = max_keys // MIN_LEAF_KEYS + 2
    lengths = {
        Arena.TREE_RECORDS: max(1, max_keys) * RECORD_SIZE,
        Arena.TREE_LEAVES: leaves * NODE_SIZE,
    }
    if mode is Mode.FULL:
        lengths[Arena.TREE_INTERNAL] = (leaves // (MIN_CHILDREN - 1) + 8) * NODE_SIZE
    return lengths


def pack_sizes(count: int, bucket_size: int) -> list[int]:
    """Split ``count`` children into ceil(count / bucket_size) near-equal groups.

    If that leaves a group below the minimum fanout (only possible for buckets
    smaller than the order), fewer, larger groups are used instead.
    """
    groups = -(-count // bucket_size)
    while groups > 1 and count // groups < MIN_CHILDREN:
        groups -= 1
    q, r = divmod(count, groups)
    return [q + 1] * r + [q] * (groups - r)


class Node:
    __slots__ = ("is_leaf", "keys", "links", "parent", "next", "offset")

    def __init__(self, is_leaf: bool, offset: int | None = None):
        self.is_leaf = is_leaf
        self.keys: list[int] = []
        # leaves: record offsets; internal nodes: child Node objects
        self.links: list = []
        self.parent: Node | None = None
        self.next: Node | None = None
        self.offset = offset

    def __repr__(self) -> str:
        kind = "Leaf" if self.is_leaf else "Internal"
        return f"<{kind} @{self.offset} keys={self.keys}>"


@dataclass
class TreeStats:
    n: int
    t: float
    internal_nodes: int
    height: int

    @property
    def reduction_factor(self) -> float:
        """Stored-node reduction predicted from leaf count and internal occupancy."""
        if self.n <= 1 or self.internal_nodes == 0:
            return 1.0
        return (1 - 1 / self.n) * (self.t / (self.t - 1))

    @property
    def measured_reduction(self) -> float:
        """Nodes a fully persistent tree stores per node this tree stores."""
        return (self.n + self.internal_nodes) / self.n if self.n else 1.0

    @property
    def persistent_fraction(self) -> float:
        total = self.n + self.internal_nodes
        return self.n / total if total else 1.0


def _live_fields(raw: bytes) -> tuple:
    """Meaningful part of a node image; slots past the key count may hold stale bytes after a torn crash."""
    fields = _NODE.unpack(raw)
    n = fields[1]
    keys = fields[4:4 + MAX_KEYS]
    links = fields[4 + MAX_KEYS:]
    return fields[:4], keys[:n], links[:n + (0 if fields[0] else 1)]


class RecoverableBPlusTree:
    def __init__(self, region: PersistentRegion, mode: Mode):
        self.region = region
        self.mode = mode
        self.io = io_for(region, mode)
        self._full = mode is Mode.FULL
        self._hdr = region.arena(Arena.TREE_HEADER).base
        self.root: Node | None = None
        self.leftmost: Node | None = None
        self._fresh: list[Node] = []
        self._touched: dict[Node, None] = {}
        self._freed: set[Node] = set()
        self._header_dirty = False

    @classmethod
    def create(cls, region: PersistentRegion, mode: Mode = Mode.PARTLY) -> RecoverableBPlusTree:
        if region.init_flag(Arena.TREE_HEADER):
            raise AlreadyInitialized("tree already initialised in this region")
        tree = cls(region, mode)
        tree.io.write(tree._hdr, _HEADER.pack(NIL, NIL, mode.code))
        tree.io.flush(tree._hdr, LINE)
        tree.io.fence()
        region.set_init_flag(Arena.TREE_HEADER)
        return tree

    # -- lookup ------------------------------------------------------------

    def _find_leaf(self, key: int) -> Node | None:
        node = self.root
        if node is None:
            return None
        while not node.is_leaf:
            node = node.links[bisect_right(node.keys, key)]
        return node

    def find(self, key: int) -> bytes | None:
        leaf = self._find_leaf(key)
        if leaf is None:
            return None
        i = bisect_left(leaf.keys, key)
        if i < len(leaf.keys) and leaf.keys[i] == key:
            return self.io.read(leaf.links[i], RECORD_SIZE)
        return None

    def __contains__(self, key: int) -> bool:
        return self.find(key) is not None

    def __len__(self) -> int:
        return sum(len(leaf.keys) for leaf in self.leaves())

    def leaves(self) -> Iterator[Node]:
        leaf = self.leftmost
        while leaf is not None:
            yield leaf
            leaf = leaf.next

    def items(self) -> Iterator[tuple[int, bytes]]:
        read = self.io.read
        for leaf in self.leaves():
            for key, rec in zip(leaf.keys, leaf.links):
                yield key, read(rec, RECORD_SIZE)

    # -- persistence -------------------------------------------------------

    def _new_node(self, is_leaf: bool) -> Node:
        if is_leaf:
            offset = self.region.alloc(Arena.TREE_LEAVES, NODE_SIZE, NODE_SIZE)
        elif self._full:
            offset = self.region.alloc(Arena.TREE_INTERNAL, NODE_SIZE, NODE_SIZE)
        else:
            offset = None
        node = Node(is_leaf, offset)
        self._fresh.append(node)
        return node

    def _free_node(self, node: Node) -> None:
        self._freed.add(node)
        if node.offset is not None:
            arena = Arena.TREE_LEAVES if node.is_leaf else Arena.TREE_INTERNAL
            self.region.free(arena, node.offset, NODE_SIZE)

    def _touch(self, node: Node) -> None:
        self._touched[node] = None

    def image(self, node: Node) -> bytes:
        n = len(node.keys)
        if node.is_leaf:
            links = [r >> LINE_SHIFT for r in node.links]
            nxt = node.next.offset if node.next is not None else NIL
        else:
            links = [c.offset >> LINE_SHIFT for c in node.links]
            nxt = NIL
        parent = node.parent.offset if self._full and node.parent is not None else NIL
        return _NODE.pack(
            node.is_leaf,
            n,
            nxt,
            parent,
            *node.keys,
            *_ZERO_KEYS[n:],
            *links,
            *_ZERO_LINKS[len(links):],
        )

    def _persist(self, node: Node) -> None:
        io = self.io
        off = node.offset
        img = self.image(node)
        cur = io.read(off, NODE_SIZE)
        for start in range(0, NODE_SIZE, LINE):
            line = img[start:start + LINE]
            if line != cur[start:start + LINE]:
                io.write(off + start, line)
                io.flush(off + start, LINE)

    def _header_image(self) -> bytes:
        leftmost = self.leftmost.offset if self.leftmost is not None else NIL
        root = self.root.offset if self._full and self.root is not None else NIL
        return _HEADER.pack(leftmost, root or NIL, self.mode.code)

    def _commit(self) -> None:
        """Write back everything this operation changed, new nodes first, then end the op."""
        freed = self._freed
        done = set()
        for node in self._fresh:
            if node not in freed and node.offset is not None:
                self._persist(node)
                done.add(node)
        for node in self._touched:
            if node not in freed and node not in done and node.offset is not None:
                self._persist(node)
        if self._header_dirty:
            raw = self._header_image()
            if self.io.read(self._hdr, len(raw)) != raw:
                self.io.write(self._hdr, raw)
                self.io.flush(self._hdr, len(raw))
        self._fresh = []
        self._touched = {}
        self._freed = set()
        self._header_dirty = False
        self.io.end_op()

    # -- insert ------------------------------------------------------------

    def insert(self, key: int, value: int | bytes) -> None:
        if not _I64_MIN <= key <= _I64_MAX:
            raise ConfigError(f"key {key} does not fit in a signed 64-bit integer")
        leaf = self._find_leaf(key)
        if leaf is not None:
            i = bisect_left(leaf.keys, key)
            if i < len(leaf.keys) and leaf.keys[i] == key:
                raise DuplicateKeyError(key)
        rec = self.region.alloc(Arena.TREE_RECORDS, RECORD_SIZE, RECORD_SIZE)
        self.io.write(rec, pack_payload(value, RECORD_SIZE))
        self.io.flush(rec, RECORD_SIZE)
        if leaf is None:
            leaf = self._new_node(True)
            leaf.keys.append(key)
            leaf.links.append(rec)
            self.root = self.leftmost = leaf
            self._header_dirty = True
        else:
            leaf.keys.insert(i, key)
            leaf.links.insert(i, rec)
            self._touch(leaf)
            if len(leaf.keys) > MAX_KEYS:
                self._split_leaf(leaf)
        self._commit()

    def _split_leaf(self, leaf: Node) -> None:
        split = math.ceil(MAX_KEYS / 2)
        right = self._new_node(True)
        right.keys = leaf.keys[split:]
        right.links = leaf.links[split:]
        del leaf.keys[split:]
        del leaf.links[split:]
        right.next = leaf.next
        leaf.next = right
        right.parent = leaf.parent
        self._insert_into_parent(leaf, right.keys[0], right)

    def _insert_into_parent(self, left: Node, key: int, right: Node) -> None:
        parent = left.parent
        if parent is None:
            root = self._new_node(False)
            root.keys = [key]
            root.links = [left, right]
            left.parent = right.parent = root
            self._touch(left)
            self._touch(right)
            self.root = root
            self._header_dirty = True
            return
        idx = parent.links.index(left)
        parent.keys.insert(idx, key)
        parent.links.insert(idx + 1, right)
        right.parent = parent
        self._touch(parent)
        if len(parent.keys) > MAX_KEYS:
            self._split_internal(parent)

    def _split_internal(self, node: Node) -> None:
        split = MIN_CHILDREN
        right = self._new_node(False)
        promoted = node.keys[split - 1]
        right.keys = node.keys[split:]
        right.links = node.links[split:]
        del node.keys[split - 1:]
        del node.links[split:]
        right.parent = node.parent
        for child in right.links:
            child.parent = right
            self._touch(child)
        self._insert_into_parent(node, promoted, right)

    # -- delete ------------------------------------------------------------

    def delete(self, key: int) -> None:
        leaf = self._find_leaf(key)
        i = bisect_left(leaf.keys, key) if leaf is not None else 0
        if leaf is None or i >= len(leaf.keys) or leaf.keys[i] != key:
            raise KeyNotFound(key)
        rec = leaf.links[i]
        del leaf.keys[i]
        del leaf.links[i]
        self._touch(leaf)
        self.region.free(Arena.TREE_RECORDS, rec, RECORD_SIZE)
        self._rebalance(leaf)
        self._commit()

    def _rebalance(self, node: Node) -> None:
        if node is self.root:
            self._adjust_root()
            return
        floor = MIN_LEAF_KEYS if node.is_leaf else MIN_INTERNAL_KEYS
        if len(node.keys) >= floor:
            return
        parent = node.parent
        idx = parent.links.index(node)
        if idx == 0:
            neighbor, sep = parent.links[1], 0
        else:
            neighbor, sep = parent.links[idx - 1], idx - 1
        capacity = ORDER if node.is_leaf else ORDER - 1
        if len(neighbor.keys) + len(node.keys) < capacity:
            self._coalesce(node, neighbor, idx, sep)
        else:
            self._redistribute(node, neighbor, idx, sep)

    def _adjust_root(self) -> None:
        root = self.root
        if root.keys:
            return
        if root.is_leaf:
            self._free_node(root)
            self.root = self.leftmost = None
        else:
            child = root.links[0]
            child.parent = None
            self._touch(child)
            self._free_node(root)
            self.root = child
        self._header_dirty = True

    def _coalesce(self, node: Node, neighbor: Node, idx: int, sep: int) -> None:
        left, right = (node, neighbor) if idx == 0 else (neighbor, node)
        parent = node.parent
        if left.is_leaf:
            left.keys.extend(right.keys)
            left.links.extend(right.links)
            left.next = right.next
        else:
            left.keys.append(parent.keys[sep])
            left.keys.extend(right.keys)
            left.links.extend(right.links)
            for child in right.links:
                child.parent = left
                self._touch(child)
        self._touch(left)
        self._free_node(right)
        del parent.keys[sep]
        del parent.links[sep + 1]
        self._touch(parent)
        self._rebalance(parent)

    def _redistribute(self, node: Node, neighbor: Node, idx: int, sep: int) -> None:
        parent = node.parent
        if idx > 0:
            if node.is_leaf:
                node.keys.insert(0, neighbor.keys.pop())
                node.links.insert(0, neighbor.links.pop())
                parent.keys[sep] = node.keys[0]
            else:
                child = neighbor.links.pop()
                node.keys.insert(0, parent.keys[sep])
                node.links.insert(0, child)
                child.parent = node
                self._touch(child)
                parent.keys[sep] = neighbor.keys.pop()
        else:
            if node.is_leaf:
                node.keys.append(neighbor.keys.pop(0))
                node.links.append(neighbor.links.pop(0))
                parent.keys[sep] = neighbor.keys[0]
            else:
                child = neighbor.links.pop(0)
                node.keys.append(parent.keys[sep])
                node.links.append(child)
                child.parent = node
                self._touch(child)
                parent.keys[sep] = neighbor.keys.pop(0)
        self._touch(node)
        self._touch(neighbor)
        self._touch(parent)

    # -- introspection -----------------------------------------------------

    def stats(self) -> TreeStats:
        if self.root is None:
            return TreeStats(n=0, t=0.0, internal_nodes=0, height=0)
        level = [self.root]
        height = 0
        internal = children = 0
        while level:
            height += 1
            if level[0].is_leaf:
                leaves = len(level)
                break
            internal += len(level)
            nxt = [c for node in level for c in node.links]
            children += len(nxt)
            level = nxt
        t = children / internal if internal else 0.0
        return TreeStats(n=leaves, t=t, internal_nodes=internal, height=height)

    def check_structure(self) -> None:
        """Full structural audit; raises CorruptionError on the first violation."""
        if self.root is None:
            if self.leftmost is not None:
                raise CorruptionError("empty tree with a leftmost leaf")
            return
        if self.root.parent is not None:
            raise CorruptionError("root has a parent")
        in_order: list[Node] = []
        depths: set[int] = set()

        def walk(node: Node, lo, hi, depth: int) -> None:
            keys = node.keys
            if any(a >= b for a, b in zip(keys, keys[1:])):
                raise CorruptionError(f"keys not ascending in {node!r}")
            if keys and ((lo is not None and keys[0] < lo) or (hi is not None and keys[-1] >= hi)):
                raise CorruptionError(f"key separation violated in {node!r}")
            if node is not self.root:
                if node.is_leaf and len(keys) < MIN_LEAF_KEYS:
                    raise CorruptionError(f"leaf underfull: {node!r}")
                if not node.is_leaf and len(node.links) < MIN_CHILDREN:
                    raise CorruptionError(f"internal node underfull: {node!r}")
            if len(keys) > MAX_KEYS:
                raise CorruptionError(f"node overfull: {node!r}")
            if node.is_leaf:
                if len(node.links) != len(keys) or (node is not self.root and not keys):
                    raise CorruptionError(f"leaf record count mismatch: {node!r}")
                depths.add(depth)
                in_order.append(node)
                return
            if len(node.links) != len(keys) + 1:
                raise CorruptionError(f"internal node has {len(node.links)} children for {len(keys)} keys")
            if node is self.root and len(node.links) < 2:
                raise CorruptionError("internal root with a single child")
            bounds = [lo, *keys, hi]
            for i, child in enumerate(node.links):
                if child.parent is not node:
                    raise CorruptionError(f"parent link broken under {node!r}")
                walk(child, bounds[i], bounds[i + 1], depth + 1)

        walk(self.root, None, None, 1)
        if len(depths) != 1:
            raise CorruptionError(f"leaves at depths {sorted(depths)}")
        chain = list(self.leaves())
        if len(chain) != len(in_order) or any(a is not b for a, b in zip(chain, in_order)):
            raise CorruptionError("leaf chain does not match in-order leaves")
        for leaf in chain:
            if _live_fields(self.io.read(leaf.offset, NODE_SIZE)) != _live_fields(self.image(leaf)):
                raise CorruptionError(f"persistent image of {leaf!r} is stale")
        header_left = self.io.read_u64(self._hdr)
        if header_left != chain[0].offset:
            raise CorruptionError("header leftmost disagrees with the leaf chain")

    # -- reconstruction ----------------------------------------------------

    @classmethod
    def reconstruct(
        cls,
        region: PersistentRegion,
        bucket_size: int = MAX_BUCKET,
        mode: Mode | None = None,
    ) -> RecoverableBPlusTree:
        """Walk the persistent leaf chain and rebuild internal levels bottom-up."""
        if not MIN_BUCKET <= bucket_size <= MAX_BUCKET:
            raise ConfigError(f"bucket size must be in [{MIN_BUCKET}, {MAX_BUCKET}], got {bucket_size}")
        if not region.init_flag(Arena.TREE_HEADER):
            raise NotInitialized("tree init flag is clear")
        hdr = region.arena(Arena.TREE_HEADER).base
        leftmost, _, code = _HEADER.unpack(region.read(hdr, _HEADER.size))
        tree = cls(region, mode or Mode.from_code(code))

        leaves_arena = region.arena(Arena.TREE_LEAVES)
        rec_arena = region.arena(Arena.TREE_RECORDS)
        leaf_slots = leaves_arena.length // NODE_SIZE
        rec_slots = rec_arena.length // RECORD_SIZE
        leaf_used = bytearray(leaf_slots)
        rec_used = np.zeros(rec_slots, dtype=bool)
        leaves: list[Node] = []

        view = region.view
        unpack = _NODE.unpack_from
        cur = leftmost
        last_key = None
        while cur != NIL:
            idx, rem = divmod(cur - leaves_arena.base, NODE_SIZE)
            if rem or not 0 <= idx < leaf_slots:
                raise CorruptionError(f"leaf link {cur} is not a leaf slot")
            if leaf_used[idx]:
                raise CorruptionError(f"leaf chain cycle at {cur}")
            leaf_used[idx] = 1
            fields = unpack(view, cur)
            is_leaf, n, nxt = fields[0], fields[1], fields[2]
            if not is_leaf:
                raise CorruptionError(f"node {cur} on the leaf chain is not a leaf")
            if n == 0 and cur == leftmost and nxt == NIL:
                leaf_used[idx] = 0
                break
            if not 1 <= n <= MAX_KEYS:
                raise CorruptionError(f"leaf {cur} has invalid num_keys {n}")
            keys = list(fields[_KEYS_AT:_KEYS_AT + n])
            if (last_key is not None and keys[0] <= last_key) or any(a >= b for a, b in zip(keys, keys[1:])):
                raise CorruptionError(f"leaf chain key order violated at {cur}")
            last_key = keys[-1]
            recs = [p << LINE_SHIFT for p in fields[_LINKS_AT:_LINKS_AT + n]]
            for r in recs:
                ridx, rrem = divmod(r - rec_arena.base, RECORD_SIZE)
                if rrem or not 0 <= ridx < rec_slots or rec_used[ridx]:
                    raise CorruptionError(f"leaf {cur} has invalid record link {r}")
                rec_used[ridx] = True
            leaf = Node(True, cur)
            leaf.keys = keys
            leaf.links = recs
            if leaves:
                leaves[-1].next = leaf
            leaves.append(leaf)
            cur = nxt
        del view

        _rebuild_free(region, Arena.TREE_LEAVES, np.frombuffer(leaf_used, dtype=np.uint8).astype(bool), NODE_SIZE)
        _rebuild_free(region, Arena.TREE_RECORDS, rec_used, RECORD_SIZE)
        if tree._full:
            internal = region.arena(Arena.TREE_INTERNAL)
            region.rebuild_allocator(Arena.TREE_INTERNAL, internal.base, NODE_SIZE, [])

        if leaves:
            tree.leftmost = leaves[0]
            tree.root = tree._build_levels(leaves, bucket_size)
        if tree._full:
            tree._persist_all()
        return tree

    def _build_levels(self, leaves: list[Node], bucket_size: int) -> Node:
        level: list[Node] = leaves
        mins = [leaf.keys[0] for leaf in leaves]
        while len(level) > 1:
            parents, parent_mins = [], []
            pos = 0
            for size in pack_sizes(len(level), bucket_size):
                group = level[pos:pos + size]
                node = Node(False)
                if self._full:
                    node.offset = self.region.alloc(Arena.TREE_INTERNAL, NODE_SIZE, NODE_SIZE)
                node.links = group
                node.keys = mins[pos + 1:pos + size]
                for child in group:
                    child.parent = node
                parents.append(node)
                parent_mins.append(mins[pos])
                pos += size
            level, mins = parents, parent_mins
        return level[0]

    def _persist_all(self) -> None:
        flushes = self.region.line_flushes
        stack = [self.root] if self.root is not None else []
        while stack:
            node = stack.pop()
            self._persist(node)
            if not node.is_leaf:
                stack.extend(node.links)
        raw = self._header_image()
        if self.io.read(self._hdr, len(raw)) != raw:
            self.io.write(self._hdr, raw)
            self.io.flush(self._hdr, len(raw))
        if self.region.line_flushes != flushes:
            self.io.fence()

    def inject_bug(self, bug: str, rng: random.Random) -> None:
        """Corrupt staged or volatile state only; nothing is flushed."""
        if self.mode is not Mode.PARTLY_CKPT:
            raise UnsupportedOperation("bug injection needs checkpoint mode; direct modes write through")
        leaves = list(self.leaves())
        if not leaves:
            return
        if bug == "SelfLoopNext":
            leaf = rng.choice(leaves)
            self.io.write(leaf.offset + 8, struct.pack("<Q", leaf.offset))
        elif bug == "ScrambledPrev":
            nodes = list(self._all_nodes())
            for node in nodes:
                wrong = [n for n in nodes if n is not node.parent] + ([None] if node.parent is not None else [])
                node.parent = rng.choice(wrong) if wrong else Node(False)
        elif bug == "DanglingTail":
            leaf = rng.choice(leaves)
            leaf.next = Node(True, leaf.offset + NODE_SIZE * rng.randrange(1, 4))
        else:
            raise UnsupportedOperation(f"bug {bug!r} does not apply to the tree")

    def _all_nodes(self) -> Iterator[Node]:
        stack = [self.root] if self.root is not None else []
        while stack:
            node = stack.pop()
            yield node
            if not node.is_leaf:
                stack.extend(node.links)


def _rebuild_free(region: PersistentRegion, arena: Arena, used: np.ndarray, size: int) -> None:
    base = region.arena(arena).base
    idx = np.flatnonzero(used)
    used_end = int(idx[-1]) + 1 if idx.size else 0
    free = (np.flatnonzero(~used[:used_end]) * size + base).tolist()
    region.rebuild_allocator(arena, base + used_end * size, size, free)
