"""Deterministic insert/delete workloads and a uniform driver per structure."""
from __future__ import annotations

import enum
import os
import random
import tempfile
from dataclasses import dataclass
from pathlib import Path

from . import bptree, dlist, hashmap
from .errors import ConfigError, CorruptionError
from .reference import RefList, RefMap, RefTree
from .region import Arena, Backend, PersistentRegion, create_region, layout_capacity
from .staging import Mode, payload_word


class Structure(enum.Enum):
    LIST = "list"
    TREE = "tree"
    MAP = "map"

    @classmethod
    def parse(cls, text: str) -> Structure:
        aliases = {"dlist": "list", "linkedlist": "list", "bptree": "tree", "btree": "tree", "hashmap": "map"}
        return cls(aliases.get(text.lower(), text.lower()))


def parse_mix(text: str) -> tuple[int, int]:
    if text == "insert-only":
        return (1, 0)
    if text == "delete-only":
        return (0, 1)
    try:
        a, b = (int(x) for x in text.split(":"))
    except ValueError:
        raise ConfigError(f"mix must be A:B, insert-only or delete-only, got {text!r}") from None
    return (a, b)


def mix_name(mix: tuple[int, int]) -> str:
    a, b = mix
    if b == 0:
        return "insert-only"
    if a == 0:
        return "delete-only"
    return f"{a}:{b}"


@dataclass(frozen=True)
class WorkloadSpec:
    structure: Structure
    mode: Mode = Mode.PARTLY
    mix: tuple[int, int] = (1, 1)
    op_count: int = 1000
    init_count: int = 0
    seed: int = 0

    def __post_init__(self):
        a, b = self.mix
        if a < 0 or b < 0 or a + b == 0:
            raise ConfigError(f"invalid insert:delete ratio {a}:{b}")
        if self.op_count < 0 or self.init_count < 0:
            raise ConfigError("op and init counts must be non-negative")
        if a == 0 and self.init_count < self.op_count:
            raise ConfigError(
                f"delete-only workload needs init_count >= op_count ({self.init_count} < {self.op_count})"
            )

    @property
    def name(self) -> str:
        return mix_name(self.mix)


Op = tuple[str, int, int]


@dataclass
class Trace:
    init: list[Op]
    ops: list[Op]

    @property
    def max_live(self) -> int:
        live = peak = 0
        for kind, _, _ in self.init + self.ops:
            live += 1 if kind == "i" else -1
            peak = max(peak, live)
        return peak


def _value_for(key: int) -> int:
    return (key * 0x9E3779B97F4A7C15) & ((1 << 62) - 1)


def generate_trace(spec: WorkloadSpec) -> Trace:
    """Init inserts, then ``op_count`` ops following the insert:delete cycle.

    Victims are drawn uniformly from live keys. List keys are sequence numbers
    and double as the stored value; tree and map keys are random nonzero 62-bit ints.
    """
    rng = random.Random(spec.seed)
    seen: set[int] = set()
    pool: list[int] = []
    counter = 0

    def fresh() -> int:
        nonlocal counter
        if spec.structure is Structure.LIST:
            counter += 1
            return counter
        while True:
            key = rng.getrandbits(62) + 1
            if key not in seen:
                seen.add(key)
                return key

    def insert() -> Op:
        key = fresh()
        pool.append(key)
        value = key if spec.structure is Structure.LIST else _value_for(key)
        return ("i", key, value)

    def delete() -> Op:
        if not pool:
            raise ConfigError("workload deletes from an empty structure; raise init_count")
        i = rng.randrange(len(pool))
        pool[i], pool[-1] = pool[-1], pool[i]
        return ("d", pool.pop(), 0)

    init = [insert() for _ in range(spec.init_count)]
    a, b = spec.mix
    cycle = ["i"] * a + ["d"] * b
    ops = [insert() if cycle[n % len(cycle)] == "i" else delete() for n in range(spec.op_count)]
    return Trace(init, ops)


@dataclass(frozen=True)
class StructureOptions:
    bucket_size: int = bptree.MAX_BUCKET
    load_factor: float = hashmap.LOAD_FACTOR
    initial_capacity: int = 16


def arena_plan(structure: Structure, mode: Mode, max_live: int, opts: StructureOptions = StructureOptions()) -> dict[Arena, int]:
    if structure is Structure.LIST:
        return dlist.arena_lengths(max_live)
    if structure is Structure.TREE:
        return bptree.arena_lengths(max_live, mode)
    return hashmap.arena_lengths(max(max_live, opts.initial_capacity), mode, opts.load_factor)


def region_dir() -> Path:
    return Path(os.environ.get("PERSISTKIT_REGION_DIR") or tempfile.gettempdir())


def make_region(
    structure: Structure,
    mode: Mode,
    max_live: int,
    backend: Backend = Backend.SIM,
    opts: StructureOptions = StructureOptions(),
    path: Path | None = None,
) -> PersistentRegion:
    layout = arena_plan(structure, mode, max_live, opts)
    capacity = layout_capacity(layout)
    if backend is Backend.FILE and path is None:
        fd, name = tempfile.mkstemp(prefix=f"persistkit-{structure.value}-", suffix=".region", dir=region_dir())
        os.close(fd)
        path = Path(name)
    return create_region(path, capacity, backend, layout)


class Driver:
    """Uniform insert/delete/content surface over one recoverable structure."""

    structure: Structure

    def insert(self, key: int, value: int) -> None:
        raise NotImplementedError

    def delete(self, key: int) -> None:
        raise NotImplementedError

    def content(self):
        raise NotImplementedError

    def audit(self) -> None:
        """Raise CorruptionError if redundant volatile state disagrees with persistent state."""

    def apply(self, op: Op) -> None:
        kind, key, value = op
        if kind == "i":
            self.insert(key, value)
        else:
            self.delete(key)


class ListDriver(Driver):
    structure = Structure.LIST

    def __init__(self, lst: dlist.RecoverableList):
        self.handle = lst
        self.nodes = {payload_word(lst.value(n)): n for n in lst.nodes()}

    def insert(self, key, value):
        self.nodes[key] = self.handle.append(value)

    def delete(self, key):
        self.handle.delete(self.nodes.pop(key))

    def content(self) -> list[int]:
        return [payload_word(v) for v in self.handle.values()]

    def audit(self) -> None:
        forward = list(self.handle.nodes())
        backward = list(self.handle.nodes_backward())
        if backward != forward[::-1]:
            raise CorruptionError("backward traversal is not the reversed forward traversal")
        if len(forward) != len(self.handle):
            raise CorruptionError("volatile length disagrees with traversal")


class TreeDriver(Driver):
    structure = Structure.TREE

    def __init__(self, tree: bptree.RecoverableBPlusTree):
        self.handle = tree

    def insert(self, key, value):
        self.handle.insert(key, value)

    def delete(self, key):
        self.handle.delete(key)

    def content(self) -> list[tuple[int, int]]:
        return [(k, payload_word(v)) for k, v in self.handle.items()]

    def audit(self) -> None:
        self.handle.check_structure()


class MapDriver(Driver):
    structure = Structure.MAP

    def __init__(self, m: hashmap.RecoverableHashMap):
        self.handle = m

    def insert(self, key, value):
        self.handle.put(key, value)

    def delete(self, key):
        self.handle.remove(key)

    def content(self) -> dict[int, int]:
        return {k: payload_word(v) for k, v in self.handle.items()}

    def audit(self) -> None:
        self.handle.check_structure()


def create_driver(structure: Structure, region: PersistentRegion, mode: Mode, opts: StructureOptions = StructureOptions()) -> Driver:
    if structure is Structure.LIST:
        return ListDriver(dlist.RecoverableList.create(region, mode))
    if structure is Structure.TREE:
        return TreeDriver(bptree.RecoverableBPlusTree.create(region, mode))
    return MapDriver(hashmap.RecoverableHashMap.create(region, opts.initial_capacity, mode, opts.load_factor))


def reconstruct_driver(structure: Structure, region: PersistentRegion, opts: StructureOptions = StructureOptions()) -> Driver:
    if structure is Structure.LIST:
        return ListDriver(dlist.RecoverableList.reconstruct(region))
    if structure is Structure.TREE:
        return TreeDriver(bptree.RecoverableBPlusTree.reconstruct(region, opts.bucket_size))
    return MapDriver(hashmap.RecoverableHashMap.reconstruct(region, opts.load_factor))


class Reference:
    """Reference replay of a trace; content() matches Driver.content() for the same structure."""

    def __init__(self, structure: Structure):
        self.structure = structure
        self._impl = {Structure.LIST: RefList, Structure.TREE: RefTree, Structure.MAP: RefMap}[structure]()

    def apply(self, op: Op) -> None:
        kind, key, value = op
        impl = self._impl
        if self.structure is Structure.LIST:
            impl.append(key, value) if kind == "i" else impl.delete(key)
        elif self.structure is Structure.TREE:
            impl.insert(key, value) if kind == "i" else impl.delete(key)
        else:
            impl.put(key, value) if kind == "i" else impl.remove(key)

    def content(self):
        return self._impl.content()


def first_divergence(expected, got) -> str:
    """Short description of where two contents first differ ('' when equal)."""
    if expected == got:
        return ""
    if isinstance(expected, dict):
        diff = sorted(set(expected.items()) ^ set(got.items()))
        return f"key={diff[0][0]}"
    for i, (a, b) in enumerate(zip(expected, got)):
        if a != b:
            return f"key={a[0]}" if isinstance(a, tuple) else f"index={i}"
    return f"length={len(expected)}!={len(got)}"
