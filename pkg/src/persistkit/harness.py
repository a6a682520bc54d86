"""Crash injection and recovery verification.

A trace is executed step by step (step 1 is structure init, each later step one
insert/delete). Crash points are indexed by fence count: ``after_fence(k)``
crashes after fence ``k`` and before fence ``k + 1`` runs, so under
DROP_ALL_PENDING the crash image is exactly the durable state at fence ``k``.
The recovered content is compared with a volatile reference replayed to the
step(s) that may legitimately be durable at that point.
"""
from __future__ import annotations

import bisect
import csv
import io
import random
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, CorruptionError, NotInitialized, UnsupportedOperation
from .region import DROP_ALL_PENDING, KEEP_ALL_PENDING, PER_OP, CrashPolicy, FencePolicy, SimulatedRegion
from .staging import Mode
from .workload import (
    Driver,
    Op,
    Reference,
    Structure,
    StructureOptions,
    WorkloadSpec,
    create_driver,
    first_divergence,
    generate_trace,
    make_region,
    reconstruct_driver,
)

VERDICT_COLUMNS = ("crash_index", "structure", "verdict", "divergence_key")
BUGS = ("SelfLoopNext", "ScrambledPrev", "WrongHashCache", "DanglingTail")
MAX_SWEEP_FENCES = 100_000


@dataclass(frozen=True)
class CrashPlan:
    kind: str
    index: int = 0
    policy: CrashPolicy = DROP_ALL_PENDING

    @classmethod
    def after_fence(cls, k: int, policy: CrashPolicy = DROP_ALL_PENDING) -> CrashPlan:
        return cls("fence", k, policy)

    @classmethod
    def after_flush(cls, k: int, policy: CrashPolicy = DROP_ALL_PENDING) -> CrashPlan:
        return cls("flush", k, policy)

    @classmethod
    def every_op_boundary(cls, policy: CrashPolicy = DROP_ALL_PENDING) -> CrashPlan:
        return cls("every", 0, policy)

    def __post_init__(self):
        if self.kind not in ("fence", "flush", "every"):
            raise ConfigError(f"unknown crash point kind {self.kind!r}")
        if self.index < 0:
            raise ConfigError("crash index must be non-negative")


@dataclass
class Verdict:
    crash_index: int
    structure: str
    verdict: str
    divergence_key: str = ""
    boundary: bool = True
    durable_step: int = 0

    @property
    def passed(self) -> bool:
        if self.verdict == "pass":
            return True
        # corruption that reconstruction flags is fine mid-operation, never at a boundary
        return self.verdict == "detected-corruption" and not self.boundary

    def row(self) -> tuple:
        return (self.crash_index, self.structure, self.verdict, self.divergence_key)

    def line(self) -> str:
        where = "boundary" if self.boundary else "mid-op"
        key = f" divergence={self.divergence_key}" if self.divergence_key else ""
        status = "PASS" if self.passed else "FAIL"
        return f"crash@{self.crash_index} {self.structure} {where} {self.verdict} {status}{key}"


@dataclass
class SweepReport:
    structure: str
    verdicts: list[Verdict] = field(default_factory=list)

    @property
    def pass_rate(self) -> float:
        if not self.verdicts:
            return 1.0
        return sum(v.passed for v in self.verdicts) / len(self.verdicts)

    @property
    def silent_divergences(self) -> int:
        return sum(v.verdict == "silent-divergence" for v in self.verdicts)

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for v in self.verdicts:
            key = f"{'boundary' if v.boundary else 'mid-op'}/{v.verdict}"
            out[key] = out.get(key, 0) + 1
        return out

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(VERDICT_COLUMNS)
        for v in self.verdicts:
            w.writerow(v.row())
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def lines(self) -> list[str]:
        out = [v.line() for v in self.verdicts]
        out.append(
            f"{self.structure}: {len(self.verdicts)} crash points, pass rate {self.pass_rate:.2%}, "
            f"silent divergences {self.silent_divergences}"
        )
        return out


class _Crash(Exception):
    pass


def _advance(structure: Structure, content, op: Op):
    """Reference content after one more op, computed on a copy."""
    kind, key, value = op
    if structure is Structure.LIST:
        return content + [value] if kind == "i" else [v for v in content if v != key]
    if structure is Structure.TREE:
        out = list(content)
        if kind == "i":
            bisect.insort(out, (key, value))
        else:
            out.pop(bisect.bisect_left(out, (key,)))
        return out
    out = dict(content)
    if kind == "i":
        out[key] = value
    else:
        del out[key]
    return out


class _Replay:
    def __init__(self, spec: WorkloadSpec, opts: StructureOptions, fence_policy: FencePolicy, policy: CrashPolicy):
        self.spec = spec
        self.opts = opts
        self.policy = policy
        self.trace = generate_trace(spec)
        self.ops = self.trace.init + self.trace.ops
        self.region = make_region(spec.structure, spec.mode, self.trace.max_live, opts=opts)
        if not isinstance(self.region, SimulatedRegion):
            raise UnsupportedOperation("crash replay needs the simulated backend")
        self.region.fence_policy = fence_policy
        self.reference = Reference(spec.structure)
        # history[s] = reference content once s steps have completed
        # an uninitialized region recovers as an empty structure, so step 0 == step 1
        self.empty = self.reference.content()
        self.history: dict[int, object] = {0: self.empty}
        self.fence_meta: list[tuple[int, bool]] = [(0, True)]
        self.step = 0
        self.completed = 0
        self.in_flight = False
        self.driver: Driver | None = None

    def _note_fence(self, index: int, at_end: bool) -> None:
        self.fence_meta.append((self.step, at_end))

    def run(self, on_fence=None, on_flush=None) -> None:
        region = self.region

        def fence_hook(index: int, at_end: bool) -> None:
            if on_fence is not None:
                on_fence(index)
            self._note_fence(index, at_end)

        region.on_fence = fence_hook
        region.on_flush = on_flush
        self.step, self.in_flight = 1, True
        self.driver = create_driver(self.spec.structure, region, self.spec.mode, self.opts)
        self._complete()
        for op in self.ops:
            self.step, self.in_flight = self.step + 1, True
            self.driver.apply(op)
            self.reference.apply(op)
            self._complete()

    def _complete(self) -> None:
        self.in_flight = False
        self.completed = self.step
        self.history[self.step] = self.reference.content()

    def _content_at(self, step: int):
        if step in self.history:
            return self.history[step]
        if step == 1:
            return self.empty
        if step == self.completed + 1:
            return _advance(self.spec.structure, self.history[self.completed], self.ops[step - 2])
        raise KeyError(step)

    def classify(self, image: bytearray, crash_index: int) -> Verdict:
        region = self.region
        last = region.fences
        step, at_end = self.fence_meta[last]
        durable = step if at_end else step - 1
        drop_all = self.policy.kind == "drop-all"
        if drop_all:
            hi = durable if at_end else durable + 1
            boundary = at_end
        else:
            hi = self.completed + (1 if self.in_flight else 0)
            boundary = at_end and not self.in_flight and not region.pending
        candidates = [self._content_at(s) for s in range(durable, hi + 1) if s <= self.completed + 1]
        for s in [s for s in self.history if s < durable]:
            del self.history[s]

        name = self.spec.structure.value
        crashed = SimulatedRegion.from_image(image)
        try:
            driver = reconstruct_driver(self.spec.structure, crashed, self.opts)
        except NotInitialized:
            got = self.empty
        except CorruptionError as exc:
            return Verdict(crash_index, name, "detected-corruption", str(exc)[:60], boundary, durable)
        else:
            try:
                driver.audit()
            except CorruptionError as exc:
                return Verdict(crash_index, name, "silent-divergence", f"audit:{exc}"[:60], boundary, durable)
            got = driver.content()
        if any(got == c for c in candidates):
            return Verdict(crash_index, name, "pass", "", boundary, durable)
        key = first_divergence(candidates[0], got)
        return Verdict(crash_index, name, "silent-divergence", key, boundary, durable)


def replay_and_crash(
    spec: WorkloadSpec,
    plan: CrashPlan,
    opts: StructureOptions = StructureOptions(),
    fence_policy: FencePolicy = PER_OP,
) -> Verdict | SweepReport:
    """Run ``spec`` to the crash point, crash, reconstruct and compare with the reference.

    ``every`` plans return a :class:`SweepReport`; single-point plans a :class:`Verdict`.
    """
    if plan.kind == "every":
        return sweep_crash_points(spec, plan.policy, opts, fence_policy)
    replay = _Replay(spec, opts, fence_policy, plan.policy)
    target = plan.index

    def on_fence(index: int) -> None:
        if index == target + 1:
            raise _Crash

    def on_flush(index: int) -> None:
        if index == target:
            raise _Crash

    try:
        if plan.kind == "fence":
            replay.run(on_fence=on_fence)
        else:
            replay.run(on_flush=on_flush)
    except _Crash:
        pass
    else:
        limit = replay.region.fences if plan.kind == "fence" else replay.region.flush_calls
        if target > limit:
            raise ConfigError(f"crash index {target} beyond trace length ({limit})")
    image = replay.region.crash_image(plan.policy)
    return replay.classify(image, target)


def sweep_crash_points(
    spec: WorkloadSpec,
    policy: CrashPolicy = DROP_ALL_PENDING,
    opts: StructureOptions = StructureOptions(),
    fence_policy: FencePolicy = PER_OP,
) -> SweepReport:
    """Crash after every fence index 0..F (F = total fences) and verify each recovery."""
    expected_fences = 2 + spec.init_count + spec.op_count
    if fence_policy.kind == "per-op" and expected_fences > MAX_SWEEP_FENCES:
        raise ConfigError(f"sweep of ~{expected_fences} fences exceeds {MAX_SWEEP_FENCES}")
    replay = _Replay(spec, opts, fence_policy, policy)
    report = SweepReport(spec.structure.value)

    def on_fence(index: int) -> None:
        image = replay.region.crash_image(policy)
        report.verdicts.append(replay.classify(image, index - 1))
        if index > MAX_SWEEP_FENCES:
            raise ConfigError(f"sweep exceeds {MAX_SWEEP_FENCES} fences")

    replay.run(on_fence=on_fence)
    final = replay.region.fences
    report.verdicts.append(replay.classify(replay.region.crash_image(policy), final))
    return report


def inject_volatile_bug(handle, bug: str, seed: int) -> None:
    """Corrupt staged/volatile state of a checkpoint-mode structure without flushing."""
    if bug not in BUGS:
        raise ConfigError(f"unknown bug {bug!r}; expected one of {BUGS}")
    handle.inject_bug(bug, random.Random(seed))


def supported_bugs(structure: Structure) -> tuple[str, ...]:
    from . import bptree, dlist, hashmap

    return {Structure.LIST: dlist.LIST_BUGS, Structure.TREE: bptree.TREE_BUGS, Structure.MAP: hashmap.MAP_BUGS}[structure]


@dataclass
class BugTrial:
    structure: str
    bug: str
    seed: int
    passed: bool
    detail: str = ""
    live_corrupted: bool = False


def bug_trial(structure: Structure, bug: str, seed: int, ops: int = 150, opts: StructureOptions = StructureOptions()) -> BugTrial:
    """Build a checkpoint-mode structure, inject ``bug``, crash, recover and compare with the pre-bug state."""
    rng = random.Random(seed)
    spec = WorkloadSpec(structure, Mode.PARTLY_CKPT, (rng.randint(1, 4), 1), ops, rng.randint(0, ops), seed)
    trace = generate_trace(spec)
    region = make_region(structure, spec.mode, trace.max_live, opts=opts)
    driver = create_driver(structure, region, spec.mode, opts)
    reference = Reference(structure)
    for op in trace.init + trace.ops:
        driver.apply(op)
        reference.apply(op)
    expected = reference.content()
    inject_volatile_bug(driver.handle, bug, seed)
    live_corrupted = _observably_corrupt(driver, expected)
    crashed = region.simulate_crash(KEEP_ALL_PENDING)
    try:
        recovered = reconstruct_driver(structure, crashed, opts)
        recovered.audit()
        got = recovered.content()
    except CorruptionError as exc:
        return BugTrial(structure.value, bug, seed, False, f"corruption: {exc}", live_corrupted)
    divergence = first_divergence(expected, got)
    return BugTrial(structure.value, bug, seed, not divergence, divergence, live_corrupted)


def _observably_corrupt(driver: Driver, expected) -> bool:
    try:
        driver.audit()
        return driver.content() != expected
    except (CorruptionError, KeyError, IndexError, ValueError):
        return True


def bug_campaign(structure: Structure, trials: int = 100, seed: int = 0, ops: int = 150) -> list[BugTrial]:
    rng = random.Random(seed)
    bugs = supported_bugs(structure)
    return [bug_trial(structure, rng.choice(bugs), rng.getrandbits(32), ops) for _ in range(trials)]
