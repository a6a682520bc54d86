"""Benchmarks: workload timing, flush-count scaling, flush granularity, reconstruction."""
from __future__ import annotations

import csv
import io
import os
import statistics
import time
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from . import bptree, dlist, hashmap
from .errors import ConfigError, CorruptionError
from .region import LINE, PER_OP, Arena, Backend, FencePolicy, PersistentRegion, create_region, layout_capacity, open_region
from .staging import Mode, payload_word
from .workload import (
    Driver,
    Reference,
    Structure,
    StructureOptions,
    WorkloadSpec,
    arena_plan,
    create_driver,
    first_divergence,
    generate_trace,
    make_region,
    region_dir,
)

COLUMNS = ("structure", "mode", "workload", "ops", "line_flushes", "fences", "wall_s", "flush_s", "flush_fraction", "repeat")
COUNT_COLUMNS = ("structure", "mode", "workload", "ops", "line_flushes", "fences", "repeat")
GRANULARITIES = (8, 16, 32, 64)


@dataclass(frozen=True)
class BenchRow:
    structure: str
    mode: str
    workload: str
    ops: int
    line_flushes: int
    fences: int
    wall_s: float
    flush_s: float
    flush_fraction: float
    repeat: str

    def values(self) -> tuple:
        return (
            self.structure,
            self.mode,
            self.workload,
            self.ops,
            self.line_flushes,
            self.fences,
            f"{self.wall_s:.6f}",
            f"{self.flush_s:.6f}",
            f"{self.flush_fraction:.4f}",
            self.repeat,
        )

    def counts(self) -> tuple:
        return tuple(getattr(self, c) for c in COUNT_COLUMNS)


def rows_to_csv(rows: Iterable[BenchRow], path: str | Path | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for row in rows:
        w.writerow(row.values())
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def _with_median(rows: list[BenchRow]) -> list[BenchRow]:
    """Append a median row; counting columns are identical across repeats by construction."""
    first = rows[0]
    if any(r.counts()[:-1] != first.counts()[:-1] for r in rows):
        raise RuntimeError("flush/fence counts differ between repeats")
    wall = statistics.median(r.wall_s for r in rows)
    flush = statistics.median(r.flush_s for r in rows)
    median = BenchRow(
        first.structure, first.mode, first.workload, first.ops, first.line_flushes, first.fences,
        wall, flush, flush / wall if wall > 0 else 0.0, "median",
    )
    return rows + [median]


def median_row(rows: Sequence[BenchRow], workload: str | None = None) -> BenchRow:
    for row in rows:
        if row.repeat == "median" and (workload is None or row.workload == workload):
            return row
    raise KeyError(workload)


def _discard(region: PersistentRegion, created: bool) -> None:
    region.close()
    if created and region.path is not None and region.backend is Backend.FILE:
        region.path.unlink(missing_ok=True)


@dataclass(frozen=True)
class BenchConfig:
    workload: WorkloadSpec
    backend: Backend = Backend.SIM
    fence_policy: FencePolicy = PER_OP
    output: Path | None = None
    repeats: int = 1
    options: StructureOptions = StructureOptions()

    def __post_init__(self):
        if self.repeats < 1:
            raise ConfigError("repeats must be at least 1")


def run_workload(config: BenchConfig) -> list[BenchRow]:
    """Populate ``init_count`` entries, then time ``op_count`` ops; one row per repeat plus a median row."""
    spec = config.workload
    trace = generate_trace(spec)
    rows = []
    for r in range(config.repeats):
        region = make_region(spec.structure, spec.mode, trace.max_live, config.backend, config.options)
        try:
            driver = create_driver(spec.structure, region, spec.mode, config.options)
            for op in trace.init:
                driver.apply(op)
            region.drain()
            region.fence_policy = config.fence_policy
            region.touch_pages()
            region.reset_stats()
            t0 = time.perf_counter()
            for op in trace.ops:
                driver.apply(op)
            region.drain()
            wall = time.perf_counter() - t0
            s = region.stats(wall)
        finally:
            _discard(region, True)
        rows.append(
            BenchRow(spec.structure.value, spec.mode.value, spec.name, s.ops, s.line_flushes, s.fences,
                     s.wall_time, s.flush_time, s.flush_fraction, str(r))
        )
    rows = _with_median(rows)
    if config.output is not None:
        rows_to_csv(rows, config.output)
    return rows


def _bare_region(n_lines: int, backend: Backend) -> tuple[PersistentRegion, int]:
    """Region whose node arena holds ``n_lines`` 64B cells; returns it with the arena base."""
    layout = {Arena.LIST_NODES: max(n_lines, 1) * LINE}
    path = None
    if backend is Backend.FILE:
        path = region_dir() / f"persistkit-bench-{os.getpid()}-{time.monotonic_ns()}.region"
    region = create_region(path, layout_capacity(layout), backend, layout)
    return region, region.arena(Arena.LIST_NODES).base


def _as_fraction(f) -> Fraction:
    frac = Fraction(f).limit_denominator(1 << 20)
    if not 0 < frac <= 1:
        raise ConfigError(f"flush fraction must be in (0, 1], got {f}")
    return frac


def run_flush_scaling(
    base_ops: int,
    fractions: Sequence[float | Fraction] = (Fraction(1, 8), Fraction(1, 4), Fraction(1, 2), Fraction(1)),
    backend: Backend = Backend.SIM,
    repeats: int = 1,
) -> list[BenchRow]:
    """Append ``base_ops`` 64B nodes to a singly linked list, flushing only a fraction of them.

    Node ``i`` is flushed (and fenced) when ``floor((i + 1) f) > floor(i f)``, so
    exactly ``floor(base_ops * f)`` flushes happen.
    """
    fracs = [_as_fraction(f) for f in fractions]
    if base_ops < 0 or repeats < 1:
        raise ConfigError("base_ops must be >= 0 and repeats >= 1")
    out: list[BenchRow] = []
    for frac in fracs:
        rows = []
        for r in range(repeats):
            region, base = _bare_region(base_ops, backend)
            try:
                region.touch_pages()
                region.reset_stats()
                num, den = frac.numerator, frac.denominator
                t0 = time.perf_counter()
                prev = 0
                for i in range(base_ops):
                    off = base + i * LINE
                    region.write(off, i.to_bytes(8, "little") + bytes(8))
                    if prev:
                        region.write(prev + 8, off.to_bytes(8, "little"))
                    prev = off
                    if ((i + 1) * num) // den > (i * num) // den:
                        region.flush(off, LINE)
                        region.fence()
                    region.ops += 1
                wall = time.perf_counter() - t0
                s = region.stats(wall)
            finally:
                _discard(region, True)
            rows.append(BenchRow("simple-list", "partly", f"flush-fraction={frac}", s.ops, s.line_flushes, s.fences,
                                 wall, s.flush_time, s.flush_fraction, str(r)))
        out.extend(_with_median(rows))
    return out


def run_granularity_bench(
    flush_sizes: Sequence[int] = GRANULARITIES,
    op_count: int = 10_000,
    backend: Backend = Backend.SIM,
    repeats: int = 1,
) -> list[BenchRow]:
    """Insert 64B payloads, each written and flushed in ``size``-byte chunks, one fence per insert."""
    for size in flush_sizes:
        if size not in GRANULARITIES:
            raise ConfigError(f"flush size must be one of {GRANULARITIES}, got {size}")
    if op_count < 0 or repeats < 1:
        raise ConfigError("op_count must be >= 0 and repeats >= 1")
    out: list[BenchRow] = []
    for size in flush_sizes:
        rows = []
        for r in range(repeats):
            region, base = _bare_region(op_count, backend)
            try:
                region.touch_pages()
                region.reset_stats()
                t0 = time.perf_counter()
                for i in range(op_count):
                    off = base + i * LINE
                    payload = i.to_bytes(8, "little") * (LINE // 8)
                    # write-then-flush per chunk so every flush covers freshly dirtied data
                    for c in range(0, LINE, size):
                        region.write(off + c, payload[c:c + size])
                        region.flush(off + c, size)
                    region.fence()
                    region.ops += 1
                wall = time.perf_counter() - t0
                s = region.stats(wall)
            finally:
                _discard(region, True)
            rows.append(BenchRow("payload", "partly", f"flush-size={size}", s.ops, s.line_flushes, s.fences,
                                 wall, s.flush_time, s.flush_fraction, str(r)))
        out.extend(_with_median(rows))
    return out


def entries_for_size(structure: Structure, size_bytes: int, mode: Mode = Mode.PARTLY) -> int:
    """Largest entry count whose region fits in ``size_bytes``."""
    if size_bytes <= 0:
        return 0

    def capacity(n: int) -> int:
        return layout_capacity(arena_plan(structure, mode, n))

    lo, hi = 0, max(1, size_bytes // 32)
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if capacity(mid) <= size_bytes:
            lo = mid
        else:
            hi = mid - 1
    return lo


@dataclass
class ReconstructionResult:
    structure: str
    mode: str
    entries: int
    region_bytes: int
    seconds: float
    verified: bool
    divergence: str = ""


def _reconstruct_handle(structure: Structure, region: PersistentRegion, opts: StructureOptions):
    if structure is Structure.LIST:
        return dlist.RecoverableList.reconstruct(region)
    if structure is Structure.TREE:
        return bptree.RecoverableBPlusTree.reconstruct(region, opts.bucket_size)
    return hashmap.RecoverableHashMap.reconstruct(region, opts.load_factor)


def _handle_content(structure: Structure, handle):
    if structure is Structure.LIST:
        return [payload_word(v) for v in handle.values()]
    if structure is Structure.TREE:
        return [(k, payload_word(v)) for k, v in handle.items()]
    return {k: payload_word(v) for k, v in handle.items()}


def run_reconstruction_bench(
    structure: Structure,
    size_bytes: int,
    backend: Backend = Backend.SIM,
    mode: Mode = Mode.PARTLY,
    seed: int = 0,
    opts: StructureOptions = StructureOptions(),
    repeats: int = 1,
) -> ReconstructionResult:
    """Populate an instance of about ``size_bytes``, make it durable, crash/reopen and time reconstruction.

    Content is verified against the reference afterwards; a mismatch raises CorruptionError.
    """
    n = entries_for_size(structure, size_bytes, mode)
    spec = WorkloadSpec(structure, mode, (1, 0), n, 0, seed)
    trace = generate_trace(spec)
    region = make_region(structure, mode, max(n, 1), backend, opts)
    reference = Reference(structure)
    try:
        driver: Driver = create_driver(structure, region, mode, opts)
        for op in trace.ops:
            driver.apply(op)
            reference.apply(op)
        region.drain()
        capacity = region.capacity
        times = []
        handle = None
        for _ in range(repeats):
            if backend is Backend.SIM:
                recovered = region.simulate_crash()
            else:
                region.close()
                recovered = region = open_region(region.path)
            recovered.touch_pages()
            t0 = time.perf_counter()
            handle = _reconstruct_handle(structure, recovered, opts)
            times.append(time.perf_counter() - t0)
        got = _handle_content(structure, handle)
        del handle
    finally:
        _discard(region, True)
    divergence = first_divergence(reference.content(), got)
    if divergence:
        raise CorruptionError(f"reconstructed {structure.value} diverges from reference: {divergence}")
    return ReconstructionResult(structure.value, mode.value, n, capacity, statistics.median(times), True)
