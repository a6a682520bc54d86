"""Acceptance suite: one test per primary criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (add ``-s`` to see the lines live;
they are also written straight to the terminal).
"""
import csv
import random
import time
from fractions import Fraction
from pathlib import Path

import pytest

from oracles import packing_internal_count, replay_trace
from persistkit.bench import (
    COUNT_COLUMNS,
    median_row,
    run_flush_scaling,
    run_granularity_bench,
    run_reconstruction_bench,
)
from persistkit.bptree import RecoverableBPlusTree
from persistkit.cli import main
from persistkit.harness import bug_campaign, sweep_crash_points
from persistkit.region import DROP_ALL_PENDING, Backend
from persistkit.staging import Mode
from persistkit.workload import Structure, WorkloadSpec, create_driver, generate_trace, make_region

pytestmark = pytest.mark.acceptance

OPS = 10_000
# every workload runs on a structure pre-populated with OPS entries; delete-only needs them,
# and a mixed trace from empty never grows a tree past its root leaf
WORKLOADS = {
    "insert-only": ((1, 0), OPS),
    "delete-only": ((0, 1), OPS),
    "1:1": ((1, 1), OPS),
    "2:1": ((2, 1), OPS),
    "4:1": ((4, 1), OPS),
}
SEED = 20240611


def report(capsys, name: str, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")


def traced_run(structure: Structure, mode: Mode, mix, init: int):
    spec = WorkloadSpec(structure, mode, mix, OPS, init, SEED)
    trace = generate_trace(spec)
    region = make_region(structure, mode, trace.max_live)
    driver = create_driver(structure, region, mode)
    for op in trace.init:
        driver.apply(op)
    region.drain()
    region.reset_stats()
    region.trace = []
    for op in trace.ops:
        driver.apply(op)
    region.drain()
    return region


@pytest.fixture(scope="module")
def flush_matrix():
    t0 = time.perf_counter()
    results = {}
    for structure in Structure:
        for mode in Mode:
            for name, (mix, init) in WORKLOADS.items():
                region = traced_run(structure, mode, mix, init)
                results[structure, mode, name] = (region.line_flushes, region.fences, replay_trace(region.trace))
    return results, time.perf_counter() - t0


def test_flush_count_oracle_equivalence(flush_matrix, capsys):
    results, seconds = flush_matrix
    mismatches = [
        f"{s.value}/{m.value}/{w}: {lf} vs {r.line_flushes}"
        for (s, m, w), (lf, fences, r) in results.items()
        if lf != r.line_flushes or fences != r.fences
    ]
    ok = not mismatches and seconds < 60 and len(results) == 45
    report(capsys, "flush-count oracle", ok, f"{len(results)} runs x {OPS} ops, {len(mismatches)} mismatches, {seconds:.1f}s")
    assert not mismatches, mismatches[:5]
    assert seconds < 60


def test_flush_parsimony(flush_matrix, capsys):
    results, _ = flush_matrix
    lines = []
    failures = []
    for structure in Structure:
        for name in WORKLOADS:
            partly = results[structure, Mode.PARTLY, name][0]
            full = results[structure, Mode.FULL, name][0]
            has_insert = WORKLOADS[name][0][0] > 0
            if has_insert and not partly < full:
                failures.append(f"{structure.value}/{name}: {partly} !< {full}")
            lines.append(f"{structure.value}/{name} {partly}/{full}")
    report(capsys, "flush parsimony", not failures, f"partly/full line flushes: {', '.join(lines)}")
    assert not failures


@pytest.mark.parametrize("structure", list(Structure))
def test_crash_recovery_sweep(structure, capsys):
    t0 = time.perf_counter()
    # pre-populated so crashes land in splits, merges and resizes, not on a one-entry structure
    spec = WorkloadSpec(structure, Mode.PARTLY, (1, 1), 1000, 1000, SEED)
    sweep = sweep_crash_points(spec, DROP_ALL_PENDING)
    seconds = time.perf_counter() - t0
    ok = sweep.pass_rate == 1.0 and sweep.silent_divergences == 0 and seconds < 600
    report(
        capsys, f"crash sweep {structure.value}", ok,
        f"{len(sweep.verdicts)} crash points, pass rate {sweep.pass_rate:.2%}, "
        f"silent {sweep.silent_divergences}, {seconds:.1f}s",
    )
    assert ok


@pytest.mark.parametrize("structure", list(Structure))
def test_checkpoint_isolation(structure, capsys):
    trials = bug_campaign(structure, trials=100, seed=SEED)
    recovered = sum(t.passed for t in trials)
    observable = sum(t.live_corrupted for t in trials)
    by_bug = {}
    for t in trials:
        by_bug[t.bug] = by_bug.get(t.bug, 0) + 1
    ok = recovered == 100
    report(capsys, f"checkpoint isolation {structure.value}", ok,
           f"{recovered}/100 recovered to pre-bug state, {observable}/100 visibly corrupt before crash, bugs {by_bug}")
    assert ok


def test_bptree_invariants_and_reduction(capsys):
    rng = random.Random(SEED)
    mode = Mode.PARTLY
    region = make_region(Structure.TREE, mode, 110_000)
    tree = RecoverableBPlusTree.create(region, mode)
    live: list[int] = []
    present: set[int] = set()
    for _ in range(10_000):
        if live and rng.random() < 0.4:
            k = live.pop(rng.randrange(len(live)))
            present.discard(k)
            tree.delete(k)
        else:
            k = rng.getrandbits(48)
            if k in present:
                continue
            present.add(k)
            live.append(k)
            tree.insert(k, k)
    tree.check_structure()
    rebuilt = RecoverableBPlusTree.reconstruct(region.simulate_crash(), 19)
    rebuilt.check_structure()
    small = rebuilt.stats()
    recurrence_ok = small.internal_nodes == packing_internal_count(small.n, 19)

    while len(present) < 100_000:
        k = rng.getrandbits(48)
        if k not in present:
            present.add(k)
            tree.insert(k, k)
    tree.check_structure()
    big = tree.stats()
    deviation = abs(big.measured_reduction - big.reduction_factor) / big.reduction_factor
    rebuilt = RecoverableBPlusTree.reconstruct(region.simulate_crash(), 19)
    rebuilt.check_structure()
    packed = rebuilt.stats()
    recurrence_ok = recurrence_ok and packed.internal_nodes == packing_internal_count(packed.n, 19)
    packed_dev = abs(packed.measured_reduction - packed.reduction_factor) / packed.reduction_factor
    ok = recurrence_ok and deviation <= 0.05 and packed_dev <= 0.05
    report(
        capsys, "bptree invariants", ok,
        f"10k trace + reconstruction audited; internal nodes {small.internal_nodes} and {packed.internal_nodes} "
        f"match recurrence: {recurrence_ok}; 100k keys: n={big.n} t={big.t:.2f} factor {big.reduction_factor:.5f} "
        f"vs measured {big.measured_reduction:.5f} ({deviation:.3%}), persistent fraction {big.persistent_fraction:.4f}; "
        f"after packing t={packed.t:.2f} ({packed_dev:.3%})",
    )
    assert ok


def _non_increasing(xs):
    return all(a >= b for a, b in zip(xs, xs[1:]))


def test_granularity_counting(capsys):
    sizes = (8, 16, 32, 64)
    sim = run_granularity_bench(sizes, 5000, Backend.SIM)
    counts = [median_row(sim, f"flush-size={s}").line_flushes for s in sizes]
    ratio_ok = counts == [counts[-1] * 64 // s for s in sizes] and counts[-1] == 5000
    file_rows = run_granularity_bench(sizes, 2000, Backend.FILE, repeats=3)
    walls = [median_row(file_rows, f"flush-size={s}").wall_s for s in sizes]
    file_counts = [median_row(file_rows, f"flush-size={s}").line_flushes for s in sizes]
    ok = ratio_ok and _non_increasing(walls) and file_counts == [c * 2000 // 5000 for c in counts]
    report(capsys, "granularity", ok,
           f"line flushes {counts} (8:4:2:1), file-backed median wall {[round(w, 3) for w in walls]} s")
    assert ok


def test_flush_scaling_counting(capsys):
    fractions = ("1/8", "1/4", "1/2", "1")
    sim = run_flush_scaling(8000, [Fraction(f) for f in fractions], Backend.SIM)
    counts = [median_row(sim, f"flush-fraction={f}").line_flushes for f in fractions]
    ratio_ok = counts == [1000, 2000, 4000, 8000]
    file_rows = run_flush_scaling(4000, [Fraction(f) for f in fractions], Backend.FILE, repeats=3)
    walls = [median_row(file_rows, f"flush-fraction={f}").wall_s for f in fractions]
    ok = ratio_ok and all(a <= b for a, b in zip(walls, walls[1:]))
    report(capsys, "flush scaling", ok,
           f"line flushes {counts} (1:2:4:8), file-backed median wall {[round(w, 3) for w in walls]} s")
    assert ok


def test_reconstruction_at_scale(capsys):
    size = 64 << 20
    results = {s: run_reconstruction_bench(s, size, Backend.SIM, repeats=3) for s in Structure}
    ok = all(r.verified and r.seconds < 60 for r in results.values())
    ordering = results[Structure.LIST].seconds < results[Structure.MAP].seconds
    parts = ", ".join(f"{s.value} {r.entries} entries {r.seconds:.3f}s" for s, r in results.items())
    report(capsys, "reconstruction at 64 MiB", ok and ordering, f"{parts}; list faster than map: {ordering}")
    assert ok and ordering


def _counting_csv(path: Path, columns) -> list[list[str]]:
    rows = list(csv.reader(path.open()))
    idx = [rows[0].index(c) for c in columns]
    return [[r[i] for i in idx] for r in rows]


def test_determinism(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("PERSISTKIT_REGION_DIR", str(tmp_path))
    invocations = {
        "workload-list": (["bench", "workload", "--structure", "list", "--ops", "3000", "--mix", "2:1", "--seed", "7"], COUNT_COLUMNS),
        "workload-tree": (["bench", "workload", "--structure", "tree", "--ops", "3000", "--init", "1000", "--mix", "1:1", "--seed", "7", "--fence", "batch=8"], COUNT_COLUMNS),
        "workload-map-file": (["bench", "workload", "--structure", "map", "--ops", "3000", "--mix", "4:1", "--seed", "7", "--backend", "file", "--repeats", "2"], COUNT_COLUMNS),
        "flush-scaling": (["bench", "flush-scaling", "--ops", "2000"], COUNT_COLUMNS),
        "granularity": (["bench", "granularity", "--ops", "1000"], COUNT_COLUMNS),
        "reconstruct": (["bench", "reconstruct", "--structure", "map", "--size", "1MiB", "--seed", "7"], ("structure", "mode", "entries", "region_bytes", "verified")),
        "crashtest": (["crashtest", "sweep", "--structure", "tree", "--ops", "300", "--policy", "random=5", "--seed", "7"], ("crash_index", "structure", "verdict", "divergence_key")),
    }
    differing = []
    for name, (argv, columns) in invocations.items():
        outputs = []
        for attempt in range(2):
            path = tmp_path / f"{name}-{attempt}.csv"
            main([*argv, "--csv", str(path)])
            outputs.append(_counting_csv(path, columns))
        if outputs[0] != outputs[1]:
            differing.append(name)
    capsys.readouterr()
    ok = not differing
    report(capsys, "determinism", ok, f"{len(invocations)} invocations repeated, differing counting columns: {differing or 'none'}")
    assert ok
