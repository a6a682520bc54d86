"""Byte-addressable persistent region modelled at cache-line granularity.

Two backends share one surface. ``SimulatedRegion`` keeps the visible image and
the durable image side by side: a flush snapshots the covered lines into a
pending set and the next fence makes them durable, so a crash image can be
produced under any pending-flush policy. ``FileRegion`` maps a real file; a flush
becomes an ``msync`` of the covering pages and a fence becomes ``fsync``.

Every link stored in a region is a region offset, never a process address, so
content survives being reopened at a different mapping.

File layout (little-endian)::

    0..8     magic b"PRSTKIT1"
    8..12    format version (u32)
    12..16   arena count (u32)
    16..256  arena table, 24 bytes per entry: id u32, flags u32, base u64, length u64
    256..    arenas, contiguous, each a multiple of 256 bytes
"""
from __future__ import annotations

import enum
import mmap
import os
import random
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

from .errors import (
    ConfigError,
    FaultError,
    OutOfSpaceError,
    RegionError,
    UnsupportedOperation,
)

LINE = 64
LINE_SHIFT = 6
DEVICE_GRANULARITY = 256
HEADER_SIZE = 256
MAGIC = b"PRSTKIT1"
FORMAT_VERSION = 1
NIL = 0

_U64 = struct.Struct("<Q")
_I64 = struct.Struct("<q")
_TABLE_HEAD = struct.Struct("<8sII")
_ENTRY = struct.Struct("<IIQQ")
_MAX_ARENAS = (HEADER_SIZE - _TABLE_HEAD.size) // _ENTRY.size
_INIT_FLAG = 0x1


class Backend(enum.Enum):
    FILE = "file"
    SIM = "sim"


class Arena(enum.IntEnum):
    LIST_HEADER = 1
    LIST_NODES = 2
    TREE_HEADER = 3
    TREE_LEAVES = 4
    TREE_INTERNAL = 5
    TREE_RECORDS = 6
    MAP_HEADER = 7
    MAP_ENTRIES = 8
    MAP_BUCKETS = 9


HEADER_ARENAS = (Arena.LIST_HEADER, Arena.TREE_HEADER, Arena.MAP_HEADER)
MIN_CAPACITY = HEADER_SIZE + DEVICE_GRANULARITY * len(HEADER_ARENAS)

# relative share of the body each bulk arena gets under the default layout
_DEFAULT_WEIGHTS = {
    Arena.LIST_NODES: 4,
    Arena.TREE_LEAVES: 2,
    Arena.TREE_INTERNAL: 1,
    Arena.TREE_RECORDS: 3,
    Arena.MAP_ENTRIES: 4,
    Arena.MAP_BUCKETS: 1,
}


@dataclass(frozen=True)
class ArenaInfo:
    id: Arena
    base: int
    length: int

    @property
    def end(self) -> int:
        return self.base + self.length


@dataclass
class RunStats:
    ops: int = 0
    line_flushes: int = 0
    distinct_lines_flushed: int = 0
    fences: int = 0
    wall_time: float = 0.0
    flush_time: float = 0.0

    @property
    def flush_fraction(self) -> float:
        return self.flush_time / self.wall_time if self.wall_time > 0 else 0.0


def _int_arg(text: str) -> int:
    try:
        return int(text.split("=", 1)[1])
    except ValueError:
        raise ConfigError(f"expected an integer after '=' in {text!r}") from None


@dataclass(frozen=True)
class CrashPolicy:
    """Which flushed-but-unfenced lines survive a simulated crash."""

    kind: str
    seed: int = 0

    def select(self, lines: Iterable[int]) -> list[int]:
        lines = sorted(lines)
        if self.kind == "keep-all":
            return lines
        if self.kind == "drop-all":
            return []
        if self.kind == "random":
            # string seeds hash deterministically; mixing in the lines varies the subset per crash point
            rng = random.Random(f"{self.seed}:{lines}")
            return [line for line in lines if rng.random() < 0.5]
        raise ValueError(f"unknown crash policy {self.kind!r}")

    def __str__(self) -> str:
        return f"random={self.seed}" if self.kind == "random" else self.kind

    @classmethod
    def parse(cls, text: str) -> CrashPolicy:
        if text in ("keep-all", "drop-all"):
            return cls(text)
        if text.startswith("random="):
            return cls("random", _int_arg(text))
        raise ConfigError(f"unknown crash policy {text!r}")


KEEP_ALL_PENDING = CrashPolicy("keep-all")
DROP_ALL_PENDING = CrashPolicy("drop-all")


def random_subset(seed: int) -> CrashPolicy:
    return CrashPolicy("random", seed)


@dataclass(frozen=True)
class FencePolicy:
    """When structures fence: once per operation, after every flush, or every k operations."""

    kind: str = "per-op"
    k: int = 1

    def __post_init__(self):
        if self.kind not in ("per-op", "per-flush", "batch"):
            raise ConfigError(f"unknown fence policy {self.kind!r}")
        if self.k < 1:
            raise ConfigError("batch size must be >= 1")

    def __str__(self) -> str:
        return f"batch={self.k}" if self.kind == "batch" else self.kind

    @classmethod
    def parse(cls, text: str) -> FencePolicy:
        if text in ("per-op", "per-flush"):
            return cls(text)
        if text.startswith("batch="):
            return cls("batch", _int_arg(text))
        raise ConfigError(f"unknown fence policy {text!r}")


PER_OP = FencePolicy()


def _round_up(n: int, align: int) -> int:
    return (n + align - 1) // align * align


def default_layout(capacity: int) -> dict[Arena, int]:
    body = capacity - HEADER_SIZE - DEVICE_GRANULARITY * len(HEADER_ARENAS)
    total = sum(_DEFAULT_WEIGHTS.values())
    lengths = {a: DEVICE_GRANULARITY for a in HEADER_ARENAS}
    for arena, weight in _DEFAULT_WEIGHTS.items():
        lengths[arena] = body * weight // total // DEVICE_GRANULARITY * DEVICE_GRANULARITY
    return lengths


def layout_capacity(lengths: dict[Arena, int]) -> int:
    """Smallest region capacity that fits ``lengths`` (header arenas always included)."""
    full = {a: DEVICE_GRANULARITY for a in HEADER_ARENAS}
    full.update(lengths)
    return HEADER_SIZE + sum(_round_up(n, DEVICE_GRANULARITY) for n in full.values())


def _build_table(capacity: int, layout: dict[Arena, int] | None) -> list[ArenaInfo]:
    lengths = default_layout(capacity) if layout is None else dict(layout)
    for arena in HEADER_ARENAS:
        lengths.setdefault(arena, DEVICE_GRANULARITY)
    arenas = []
    cursor = HEADER_SIZE
    for arena in Arena:
        length = _round_up(lengths.get(arena, 0), DEVICE_GRANULARITY)
        arenas.append(ArenaInfo(arena, cursor, length))
        cursor += length
    if cursor > capacity:
        raise RegionError(f"layout needs {cursor} bytes, capacity is {capacity}")
    return arenas


def _encode_header(arenas: list[ArenaInfo], flags: dict[Arena, int]) -> bytes:
    out = bytearray(HEADER_SIZE)
    _TABLE_HEAD.pack_into(out, 0, MAGIC, FORMAT_VERSION, len(arenas))
    for i, a in enumerate(arenas):
        _ENTRY.pack_into(out, _TABLE_HEAD.size + i * _ENTRY.size, int(a.id), flags.get(a.id, 0), a.base, a.length)
    return bytes(out)


def _decode_header(raw: bytes, size: int) -> tuple[list[ArenaInfo], dict[Arena, int]]:
    if len(raw) < HEADER_SIZE:
        raise RegionError("truncated region: header incomplete")
    magic, version, count = _TABLE_HEAD.unpack_from(raw, 0)
    if magic != MAGIC:
        raise RegionError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise RegionError(f"unsupported format version {version}")
    if count > _MAX_ARENAS:
        raise RegionError(f"arena table too large ({count})")
    arenas, flags = [], {}
    for i in range(count):
        aid, flag, base, length = _ENTRY.unpack_from(raw, _TABLE_HEAD.size + i * _ENTRY.size)
        try:
            arena = Arena(aid)
        except ValueError:
            raise RegionError(f"unknown arena id {aid}") from None
        if base < HEADER_SIZE or base + length > size:
            raise RegionError(f"truncated region: arena {arena.name} exceeds file size")
        arenas.append(ArenaInfo(arena, base, length))
        flags[arena] = flag
    return arenas, flags


class _Allocator:
    """Bump allocation plus a volatile free list; nothing here is persisted."""

    __slots__ = ("info", "cursor", "free")

    def __init__(self, info: ArenaInfo):
        self.info = info
        self.cursor = info.base
        self.free: dict[int, list[int]] = {}


class PersistentRegion:
    """Common surface of both backends. Use :func:`create_region` / :func:`open_region`."""

    backend: Backend

    def __init__(self, buf, capacity: int, path: Path | None):
        self._buf = buf
        self.capacity = capacity
        self.path = path
        self.line_size = LINE
        self.device_granularity = DEVICE_GRANULARITY
        arenas, self._flags = _decode_header(bytes(buf[:HEADER_SIZE]), capacity)
        self.arenas: dict[Arena, ArenaInfo] = {a.id: a for a in arenas}
        self._lo = HEADER_SIZE
        self._hi = max((a.end for a in arenas), default=HEADER_SIZE)
        self._alloc = {a.id: _Allocator(a) for a in arenas}
        self.fence_policy = PER_OP
        self.trace: list[tuple] | None = None
        # on_flush(call_index) runs after a flush; on_fence(index, at_op_end) before a fence
        self.on_flush: Callable[[int], None] | None = None
        self.on_fence: Callable[[int, bool], None] | None = None
        self.reset_stats()

    # -- accounting -------------------------------------------------------

    def reset_stats(self) -> None:
        self.ops = 0
        self.line_flushes = 0
        self.flush_calls = 0
        self.fences = 0
        self.flush_time = 0.0
        self._flushed = bytearray(self.capacity >> LINE_SHIFT)
        self._distinct = 0
        self._batch = 0

    def stats(self, wall_time: float = 0.0) -> RunStats:
        return RunStats(
            ops=self.ops,
            line_flushes=self.line_flushes,
            distinct_lines_flushed=self._distinct,
            fences=self.fences,
            wall_time=wall_time,
            flush_time=self.flush_time,
        )

    # -- raw access -------------------------------------------------------

    @property
    def view(self) -> memoryview:
        """Read-only view of the visible image, for bulk scans."""
        return memoryview(self._buf).toreadonly()

    def read(self, offset: int, n: int) -> bytes:
        if offset < 0 or n < 0 or offset + n > self.capacity:
            raise FaultError(f"read [{offset}, {offset + n}) outside region")
        return bytes(self._buf[offset:offset + n])

    def read_u64(self, offset: int) -> int:
        return _U64.unpack_from(self._buf, offset)[0]

    def read_i64(self, offset: int) -> int:
        return _I64.unpack_from(self._buf, offset)[0]

    def write(self, offset: int, payload: bytes) -> None:
        end = offset + len(payload)
        if offset < self._lo or end > self._hi or not payload:
            raise FaultError(f"write [{offset}, {end}) outside arenas")
        self._buf[offset:end] = payload
        self._written(offset, end)
        if self.trace is not None:
            self.trace.append(("w", offset, len(payload)))

    def write_u64(self, offset: int, value: int) -> None:
        self.write(offset, _U64.pack(value))

    def flush(self, offset: int, n: int) -> None:
        if offset < 0 or n <= 0 or offset + n > self.capacity:
            raise FaultError(f"flush [{offset}, {offset + n}) outside region")
        t0 = time.perf_counter()
        first = offset >> LINE_SHIFT
        last = (offset + n - 1) >> LINE_SHIFT
        self._flush_lines(first, last)
        flushed = self._flushed
        for line in range(first, last + 1):
            if not flushed[line]:
                flushed[line] = 1
                self._distinct += 1
        self.line_flushes += last - first + 1
        self.flush_calls += 1
        self.flush_time += time.perf_counter() - t0
        if self.trace is not None:
            self.trace.append(("f", offset, n))
        if self.on_flush is not None:
            self.on_flush(self.flush_calls)
        if self.fence_policy.kind == "per-flush":
            self._fence(False)

    def fence(self) -> None:
        self._fence(False)

    def end_op(self) -> None:
        """Close one structure operation; fences according to :attr:`fence_policy`."""
        self.ops += 1
        policy = self.fence_policy
        if policy.kind == "per-op":
            self._fence(True)
        elif policy.kind == "batch":
            self._batch += 1
            if self._batch >= policy.k:
                self._batch = 0
                self._fence(True)

    def drain(self) -> None:
        """Issue the fence a partially filled batch still owes."""
        if self._batch:
            self._batch = 0
            self._fence(True)

    def _fence(self, at_op_end: bool) -> None:
        if self.on_fence is not None:
            self.on_fence(self.fences + 1, at_op_end)
        t0 = time.perf_counter()
        self._fence_impl()
        self.flush_time += time.perf_counter() - t0
        self.fences += 1
        if self.trace is not None:
            self.trace.append(("F",))

    def _written(self, start: int, end: int) -> None:
        pass

    def _flush_lines(self, first: int, last: int) -> None:
        raise NotImplementedError

    def _fence_impl(self) -> None:
        raise NotImplementedError

    # -- header / init flags ---------------------------------------------

    def arena(self, arena: Arena) -> ArenaInfo:
        return self.arenas[arena]

    def init_flag(self, arena: Arena) -> bool:
        return bool(self._flags.get(arena, 0) & _INIT_FLAG)

    def set_init_flag(self, arena: Arena) -> None:
        """Durably mark a structure as initialised (write, flush, fence)."""
        self._flags[arena] = self._flags.get(arena, 0) | _INIT_FLAG
        self._write_header()
        self._fence(True)

    def _write_header(self) -> None:
        raw = _encode_header(list(self.arenas.values()), self._flags)
        self._buf[0:HEADER_SIZE] = raw
        self._written(0, HEADER_SIZE)
        if self.trace is not None:
            self.trace.append(("w", 0, HEADER_SIZE))
        self.flush(0, HEADER_SIZE)

    # -- allocation -------------------------------------------------------

    def alloc(self, arena: Arena, size: int, align: int = LINE) -> int:
        if align <= 0 or align & (align - 1):
            raise ValueError(f"alignment {align} is not a power of two")
        a = self._alloc[arena]
        free = a.free.get(size)
        if free:
            return free.pop()
        offset = _round_up(a.cursor, align)
        if offset + size > a.info.end:
            raise OutOfSpaceError(f"arena {arena.name} exhausted ({a.info.length} bytes)")
        a.cursor = offset + size
        return offset

    def free(self, arena: Arena, offset: int, size: int) -> None:
        self._alloc[arena].free.setdefault(size, []).append(offset)

    def rebuild_allocator(self, arena: Arena, cursor: int, size: int, free_slots: Iterable[int]) -> None:
        """Install allocator state recovered by a structure's reconstruction."""
        a = self._alloc[arena]
        a.cursor = cursor
        slots = sorted(free_slots, reverse=True)
        a.free = {size: slots} if slots else {}

    def allocator_state(self, arena: Arena) -> tuple[int, dict[int, list[int]]]:
        a = self._alloc[arena]
        return a.cursor, {k: list(v) for k, v in a.free.items()}

    # -- lifecycle ---------------------------------------------------------

    def touch_pages(self) -> None:
        """Read one byte per page so page-table setup stays out of timed loops."""
        buf = self._buf
        acc = 0
        for off in range(0, self.capacity, mmap.PAGESIZE):
            acc ^= buf[off]
        self._touch_sink = acc

    def simulate_crash(self, policy: CrashPolicy = DROP_ALL_PENDING) -> SimulatedRegion:
        raise UnsupportedOperation(f"{self.backend.value} backend cannot simulate crashes")

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class SimulatedRegion(PersistentRegion):
    backend = Backend.SIM

    def __init__(self, image: bytearray, path: Path | None = None):
        super().__init__(image, len(image), path)
        self._durable = bytearray(image)
        self.dirty_lines: set[int] = set()
        self.pending: dict[int, bytes] = {}

    @classmethod
    def from_image(cls, image: bytes | bytearray) -> SimulatedRegion:
        return cls(bytearray(image))

    def _written(self, start: int, end: int) -> None:
        self.dirty_lines.update(range(start >> LINE_SHIFT, ((end - 1) >> LINE_SHIFT) + 1))

    def _flush_lines(self, first: int, last: int) -> None:
        buf = self._buf
        pending = self.pending
        dirty = self.dirty_lines
        for line in range(first, last + 1):
            off = line << LINE_SHIFT
            pending[line] = bytes(buf[off:off + LINE])
            dirty.discard(line)

    def _fence_impl(self) -> None:
        durable = self._durable
        for line, data in self.pending.items():
            off = line << LINE_SHIFT
            durable[off:off + LINE] = data
        self.pending.clear()

    @property
    def durable_image(self) -> bytes:
        return bytes(self._durable)

    def crash_image(self, policy: CrashPolicy = DROP_ALL_PENDING) -> bytearray:
        image = bytearray(self._durable)
        for line in policy.select(self.pending):
            off = line << LINE_SHIFT
            image[off:off + LINE] = self.pending[line]
        return image

    def simulate_crash(self, policy: CrashPolicy = DROP_ALL_PENDING) -> SimulatedRegion:
        """Fresh region holding the durable image plus the policy's share of pending flushes."""
        return SimulatedRegion(self.crash_image(policy), self.path)


class FileRegion(PersistentRegion):
    backend = Backend.FILE

    def __init__(self, path: Path):
        self._file = open(path, "r+b")
        try:
            size = os.fstat(self._file.fileno()).st_size
            if size < HEADER_SIZE:
                raise RegionError(f"truncated region file {path} ({size} bytes)")
            self._map = mmap.mmap(self._file.fileno(), size)
        except Exception:
            self._file.close()
            raise
        try:
            super().__init__(self._map, size, Path(path))
        except Exception:
            self._map.close()
            self._file.close()
            raise

    def _flush_lines(self, first: int, last: int) -> None:
        start = (first << LINE_SHIFT) & ~(mmap.PAGESIZE - 1)
        end = (last + 1) << LINE_SHIFT
        self._map.flush(start, end - start)

    def _fence_impl(self) -> None:
        os.fsync(self._file.fileno())

    def close(self) -> None:
        if self._map.closed:
            return
        self._map.flush()
        self._map.close()
        self._file.close()


def create_region(
    path: str | os.PathLike | None,
    capacity: int,
    backend: Backend = Backend.SIM,
    layout: dict[Arena, int] | None = None,
) -> PersistentRegion:
    """Create a zeroed region whose header is durable before this returns."""
    if capacity % DEVICE_GRANULARITY:
        raise RegionError(f"capacity {capacity} is not a multiple of {DEVICE_GRANULARITY}")
    if capacity < MIN_CAPACITY:
        raise RegionError(f"capacity {capacity} below minimum header size {MIN_CAPACITY}")
    arenas = _build_table(capacity, layout)
    header = _encode_header(arenas, {})
    if backend is Backend.SIM:
        image = bytearray(capacity)
        image[:HEADER_SIZE] = header
        region: PersistentRegion = SimulatedRegion(image, Path(path) if path else None)
    else:
        if path is None:
            raise RegionError("file backend needs a path")
        path = Path(path)
        try:
            with open(path, "wb") as f:
                f.truncate(capacity)
                f.write(header)
        except OSError as exc:
            raise RegionError(f"cannot create region file {path}: {exc}") from exc
        region = FileRegion(path)
    region._write_header()
    region.fence()
    region.reset_stats()
    return region


def open_region(path: str | os.PathLike) -> FileRegion:
    """Reopen a file-backed region. No structure reconstruction happens here."""
    path = Path(path)
    if not path.exists():
        raise RegionError(f"no region file at {path}")
    return FileRegion(path)
