#!/usr/bin/env python3
"""Run the benchmark experiments end to end and write one CSV per experiment.

    python3 scripts/run_experiments.py --out results --ops 100000 --backend file

Defaults are small enough for a laptop in a few minutes; raise --ops/--init
toward 1M/2M for the desk-scale configuration.
"""
from __future__ import annotations

import argparse
import csv
import time
from fractions import Fraction
from pathlib import Path

from persistkit.bench import (
    BenchConfig,
    rows_to_csv,
    run_flush_scaling,
    run_granularity_bench,
    run_reconstruction_bench,
    run_workload,
)
from persistkit.region import Backend
from persistkit.staging import Mode
from persistkit.workload import Structure, WorkloadSpec

MIXES = {"insert-only": (1, 0), "delete-only": (0, 1), "1:1": (1, 1), "2:1": (2, 1), "4:1": (4, 1)}


def workloads(args, out: Path) -> None:
    rows = []
    for structure in Structure:
        for mode in Mode:
            for name, mix in MIXES.items():
                init = max(args.init, args.ops) if name == "delete-only" else args.init
                spec = WorkloadSpec(structure, mode, mix, args.ops, init, args.seed)
                t0 = time.perf_counter()
                got = run_workload(BenchConfig(spec, args.backend, repeats=args.repeats))
                rows.extend(got)
                med = got[-1]
                print(f"workload {structure.value:4} {mode.value:11} {name:11} flushes={med.line_flushes:>9} "
                      f"wall={med.wall_s:.3f}s flush%={med.flush_fraction:.1%} ({time.perf_counter() - t0:.1f}s)")
    rows_to_csv(rows, out / "workloads.csv")


def scaling(args, out: Path) -> None:
    fractions = [Fraction(1, 8), Fraction(1, 4), Fraction(1, 2), Fraction(1)]
    rows = run_flush_scaling(args.ops, fractions, args.backend, args.repeats)
    rows_to_csv(rows, out / "flush_scaling.csv")
    for r in rows:
        if r.repeat == "median":
            print(f"flush-scaling {r.workload:22} flushes={r.line_flushes:>8} wall={r.wall_s:.3f}s")


def granularity(args, out: Path) -> None:
    rows = run_granularity_bench((8, 16, 32, 64), args.ops // 4, args.backend, args.repeats)
    rows_to_csv(rows, out / "granularity.csv")
    for r in rows:
        if r.repeat == "median":
            print(f"granularity {r.workload:14} flushes={r.line_flushes:>8} wall={r.wall_s:.3f}s")


def reconstruction(args, out: Path) -> None:
    with open(out / "reconstruction.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["structure", "mode", "entries", "region_bytes", "reconstruct_s", "verified"])
        for structure in Structure:
            res = run_reconstruction_bench(structure, args.size_mib << 20, args.backend, seed=args.seed, repeats=args.repeats)
            w.writerow([res.structure, res.mode, res.entries, res.region_bytes, f"{res.seconds:.6f}", res.verified])
            print(f"reconstruct {res.structure:4} {res.entries:>9} entries {res.seconds:.3f}s verified={res.verified}")


EXPERIMENTS = {"workloads": workloads, "scaling": scaling, "granularity": granularity, "reconstruction": reconstruction}


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", type=Path, default=Path("results"))
    p.add_argument("--ops", type=int, default=20_000)
    p.add_argument("--init", type=int, default=40_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--size-mib", type=int, default=64)
    p.add_argument("--backend", type=Backend, default=Backend.FILE, choices=list(Backend))
    p.add_argument("--only", nargs="+", choices=list(EXPERIMENTS), default=list(EXPERIMENTS))
    args = p.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    for name in args.only:
        EXPERIMENTS[name](args, args.out)
    print(f"CSV written to {args.out}/")


if __name__ == "__main__":
    main()
