"""Command-line entry point: ``persistkit bench ...`` and ``persistkit crashtest sweep``."""
from __future__ import annotations

import argparse
import sys
from collections.abc import Sequence
from fractions import Fraction
from pathlib import Path

from .bench import (
    BenchConfig,
    rows_to_csv,
    run_flush_scaling,
    run_granularity_bench,
    run_reconstruction_bench,
    run_workload,
)
from .errors import PersistKitError
from .harness import sweep_crash_points
from .region import Backend, CrashPolicy, FencePolicy
from .staging import Mode
from .workload import Structure, StructureOptions, WorkloadSpec, parse_mix


def _structure(text: str) -> Structure:
    try:
        return Structure.parse(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"unknown structure {text!r}") from None


def _fraction(text: str) -> Fraction:
    try:
        return Fraction(text)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"bad fraction {text!r}") from None


def _size(text: str) -> int:
    units = {"k": 1 << 10, "m": 1 << 20, "g": 1 << 30}
    t = text.strip().lower().removesuffix("ib").removesuffix("b")
    if t and t[-1] in units:
        return int(float(t[:-1]) * units[t[-1]])
    return int(t)


def _workload_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--structure", type=_structure, default=Structure.LIST)
    p.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.PARTLY.value)
    p.add_argument("--ops", type=int, default=10_000)
    p.add_argument("--init", type=int, default=0)
    p.add_argument("--mix", default="1:1", help="A:B, insert-only or delete-only")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bucket-size", type=int, default=StructureOptions.bucket_size, help="tree reconstruction fan-out")
    p.add_argument("--load-factor", type=float, default=StructureOptions.load_factor, help="hashmap load factor")


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", choices=[b.value for b in Backend], default=Backend.SIM.value)
    p.add_argument("--fence", default="per-op", help="per-op, per-flush or batch=K")
    p.add_argument("--csv", type=Path, default=None, help="write CSV here instead of stdout")
    p.add_argument("--repeats", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="persistkit", description="Partly persistent data structure benchmarks.")
    verbs = parser.add_subparsers(dest="verb", required=True)

    bench = verbs.add_parser("bench").add_subparsers(dest="kind", required=True)
    w = bench.add_parser("workload", help="time an insert/delete workload")
    _workload_flags(w)
    _common_flags(w)

    fs = bench.add_parser("flush-scaling", help="simple list, flushing a fraction of nodes")
    fs.add_argument("--ops", type=int, default=80_000)
    fs.add_argument("--fractions", type=_fraction, nargs="+", default=[Fraction(1, 8), Fraction(1, 4), Fraction(1, 2), Fraction(1)])
    _common_flags(fs)

    g = bench.add_parser("granularity", help="64B payloads flushed in sub-line chunks")
    g.add_argument("--ops", type=int, default=10_000)
    g.add_argument("--sizes", type=int, nargs="+", default=[8, 16, 32, 64])
    _common_flags(g)

    r = bench.add_parser("reconstruct", help="time reconstruction of a populated instance")
    _workload_flags(r)
    _common_flags(r)
    r.add_argument("--size", type=_size, default=64 << 20, help="instance size, e.g. 64MiB")

    crash = verbs.add_parser("crashtest").add_subparsers(dest="kind", required=True)
    s = crash.add_parser("sweep", help="crash after every fence and verify recovery")
    _workload_flags(s)
    s.add_argument("--policy", default="drop-all", help="keep-all, drop-all or random=SEED")
    s.add_argument("--fence", default="per-op", help="per-op, per-flush or batch=K")
    s.add_argument("--csv", type=Path, default=None)
    return parser


def _options(args) -> StructureOptions:
    return StructureOptions(bucket_size=args.bucket_size, load_factor=args.load_factor)


def _spec(args) -> WorkloadSpec:
    return WorkloadSpec(args.structure, Mode(args.mode), parse_mix(args.mix), args.ops, args.init, args.seed)


def _emit(text: str, path: Path | None) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        path.write_text(text)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "crashtest":
            report = sweep_crash_points(_spec(args), CrashPolicy.parse(args.policy), _options(args), FencePolicy.parse(args.fence))
            if args.csv is not None:
                report.to_csv(args.csv)
                print(report.lines()[-1])
            else:
                print("\n".join(report.lines()))
            return 0 if report.pass_rate == 1.0 else 1

        backend = Backend(args.backend)
        if args.kind == "workload":
            config = BenchConfig(_spec(args), backend, FencePolicy.parse(args.fence), None, args.repeats, _options(args))
            _emit(rows_to_csv(run_workload(config)), args.csv)
        elif args.kind == "flush-scaling":
            _emit(rows_to_csv(run_flush_scaling(args.ops, args.fractions, backend, args.repeats)), args.csv)
        elif args.kind == "granularity":
            _emit(rows_to_csv(run_granularity_bench(args.sizes, args.ops, backend, args.repeats)), args.csv)
        else:
            res = run_reconstruction_bench(
                args.structure, args.size, backend, Mode(args.mode), args.seed, _options(args), args.repeats
            )
            text = (
                "structure,mode,entries,region_bytes,reconstruct_s,verified\n"
                f"{res.structure},{res.mode},{res.entries},{res.region_bytes},{res.seconds:.6f},{res.verified}\n"
            )
            _emit(text, args.csv)
    except PersistKitError as exc:
        print(f"persistkit: error: {exc}", file=sys.stderr)
        return 2
    return 0
