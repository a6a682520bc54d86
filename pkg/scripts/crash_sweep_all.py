#!/usr/bin/env python3
"""Crash sweeps for every structure, mode and pending-flush policy, plus bug campaigns.

    python3 scripts/crash_sweep_all.py --ops 1000 --out results

Boundary verdicts must all pass. Mid-operation verdicts are tallied separately:
detected corruption there is acceptable, silent divergence is listed for review.
"""
from __future__ import annotations

import argparse
from pathlib import Path

from persistkit.harness import bug_campaign, sweep_crash_points
from persistkit.region import CrashPolicy
from persistkit.staging import Mode
from persistkit.workload import Structure, WorkloadSpec


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--ops", type=int, default=1000)
    p.add_argument("--mix", default="1:1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--policies", nargs="+", default=["drop-all", "keep-all", "random=1"])
    p.add_argument("--trials", type=int, default=100, help="bug injections per structure")
    p.add_argument("--out", type=Path, default=None, help="directory for per-sweep verdict CSVs")
    args = p.parse_args()
    a, b = (int(x) for x in args.mix.split(":"))
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)

    boundary_failures = 0
    for structure in Structure:
        for mode in Mode:
            for text in args.policies:
                policy = CrashPolicy.parse(text)
                report = sweep_crash_points(WorkloadSpec(structure, mode, (a, b), args.ops, 0, args.seed), policy)
                failed = sum(1 for v in report.verdicts if v.boundary and not v.passed)
                boundary_failures += failed
                counts = ", ".join(f"{k}={n}" for k, n in sorted(report.counts().items()))
                print(f"{structure.value:4} {mode.value:11} {text:9} boundary failures={failed} [{counts}]")
                if args.out is not None:
                    report.to_csv(args.out / f"sweep_{structure.value}_{mode.value}_{text.replace('=', '')}.csv")

    for structure in Structure:
        trials = bug_campaign(structure, trials=args.trials, seed=args.seed)
        ok = sum(t.passed for t in trials)
        print(f"bugs {structure.value:4} {ok}/{len(trials)} recovered to pre-bug state")
        boundary_failures += len(trials) - ok
    return 1 if boundary_failures else 0


if __name__ == "__main__":
    raise SystemExit(main())
