"""Command-line experiment runner.

One command runs batches of fault-injected solves and reports per-run CSV
rows plus an aggregate table (mean rollback/forward recoveries, mean
iterations, abort percentage per variant).  A second command cross-checks the
closed-form window probabilities against Monte Carlo simulation.

The CSV is the single machine-readable output; the console table is a
formatted view of the same rows.
"""

import argparse
import csv
import math
import sys
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import resilience
from .faultinject import FaultModel
from .resilience import (
    ResilienceConfig,
    RUNNERS,
    VARIANTS,
    build_preconditioner,
    p_both_faulty,
    p_clean_window,
    p_exactly_one_faulty,
)
from .sparsemat import gen_poisson2d, gen_poisson3d, load_matrix_market, norm2, spmv

CSV_HEADER = ["variant", "rep", "seed", "iterations", "fr", "rr", "aborted", "final_rel_residual"]

DISPLAY_NAMES = {
    "standard": "StandardCG",
    "online-abft": "Online-ABFT",
    "twincg": "TwinCG",
    "tmr": "TMR",
}

DEFAULT_LAMBDA = 0.01
DEFAULT_REPS = 60


@dataclass
class ExperimentSpec:
    """Everything one experiment needs; identical specs give identical CSV."""

    matrix_source: str
    variants: List[str] = field(default_factory=lambda: list(VARIANTS))
    precond: str = "none"
    lam: float = DEFAULT_LAMBDA
    bit_range: Tuple[int, int] = (0, 63)
    seed: int = 0
    reps: int = DEFAULT_REPS
    cfg: ResilienceConfig = field(default_factory=ResilienceConfig)
    out: str = "runs.csv"
    mode: str = "simulated"

    def __post_init__(self):
        if self.reps < 1:
            raise ValueError(f"reps must be >= 1, got {self.reps}")
        if not self.variants:
            raise ValueError("variant set must be non-empty")


@dataclass
class VariantStats:
    mean_fr: float
    mean_rr: float
    mean_iterations: float
    abort_fraction: float


@dataclass
class AggregateStats:
    per_variant: Dict[str, VariantStats]


@dataclass
class ProbeRequest:
    lam: float
    d: int
    samples: int
    seed: int


@dataclass
class ProbeReport:
    lam: float
    d: int
    samples: int
    analytic: Tuple[float, float, float]
    empirical: Tuple[float, float, float]
    stderr: Tuple[float, float, float]


def _parse_bits(text):
    parts = text.split(":")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected LO:HI, got '{text}'")
    try:
        lo, hi = int(parts[0]), int(parts[1])
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers LO:HI, got '{text}'")
    if not (0 <= lo <= hi <= 63):
        raise argparse.ArgumentTypeError(f"bit range must satisfy 0 <= LO <= HI <= 63, got '{text}'")
    return (lo, hi)


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="twincg",
        description="Fault-tolerant conjugate gradient experiment harness.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a fault-injection experiment batch")
    run.add_argument("--matrix", required=True,
                     help="matrix source: a Matrix Market file path, poisson2d:K, or poisson3d:K")
    run.add_argument("--variant", default="all",
                     choices=list(VARIANTS) + ["all"],
                     help="solver variant to run (default: all)")
    run.add_argument("--lambda", dest="lam", type=float, default=DEFAULT_LAMBDA,
                     help=f"mean faults per replica per iteration (default: {DEFAULT_LAMBDA})")
    run.add_argument("--bits", type=_parse_bits, default=(0, 63), metavar="LO:HI",
                     help="inclusive bit-position range for flips (default: 0:63)")
    run.add_argument("--seed", type=int, default=0, help="base seed; rep j uses seed+j")
    run.add_argument("--reps", type=int, default=DEFAULT_REPS,
                     help=f"independent repetitions per variant (default: {DEFAULT_REPS})")
    run.add_argument("--d", type=int, default=5, help="detection interval in iterations (default: 5)")
    run.add_argument("--ckpt", type=int, default=10,
                     help="checkpoint interval in iterations (default: 10)")
    run.add_argument("--eps1", type=float, default=1e-15,
                     help="replica norm-gap detection threshold (default: 1e-15)")
    run.add_argument("--eps2", type=float, default=1e-10,
                     help="residual consistency threshold (default: 1e-10)")
    run.add_argument("--tol", type=float, default=1e-10,
                     help="relative convergence tolerance (default: 1e-10)")
    run.add_argument("--max-iter", type=int, default=6000,
                     help="abort bound on executed iterations (default: 6000)")
    run.add_argument("--precond", choices=["none", "jacobi"], default="none",
                     help="preconditioner (default: none)")
    run.add_argument("--out", default="runs.csv", help="per-run CSV output path (default: runs.csv)")
    run.add_argument("--mode", choices=["simulated", "concurrent"], default="simulated",
                     help="replica execution engine (default: simulated)")

    probe = sub.add_parser("probe", help="compare analytic window probabilities with Monte Carlo")
    probe.add_argument("--lambda", dest="lam", type=float, required=True,
                       help="mean faults per replica per iteration")
    probe.add_argument("--d", type=int, default=5, help="detection interval (default: 5)")
    probe.add_argument("--samples", type=int, default=1_000_000,
                       help="number of simulated windows (default: 1000000)")
    probe.add_argument("--seed", type=int, default=0, help="simulation seed")
    return parser


def parse_args(argv):
    """Map CLI flags to an ExperimentSpec (or a ProbeRequest for `probe`).

    Bare flags without a subcommand run an experiment, so
    ``twincg --matrix poisson2d:10`` works as-is.
    """
    argv = list(argv)
    if argv and argv[0] not in ("run", "probe", "-h", "--help"):
        argv = ["run"] + argv
    args = _build_parser().parse_args(argv)
    if args.command == "probe":
        return ProbeRequest(lam=args.lam, d=args.d, samples=args.samples, seed=args.seed)
    cfg = ResilienceConfig(
        d=args.d,
        checkpoint_interval=args.ckpt,
        eps1=args.eps1,
        eps2=args.eps2,
        tol=args.tol,
        max_iter=args.max_iter,
    )
    variants = list(VARIANTS) if args.variant == "all" else [args.variant]
    return ExperimentSpec(
        matrix_source=args.matrix,
        variants=variants,
        precond=args.precond,
        lam=args.lam,
        bit_range=args.bits,
        seed=args.seed,
        reps=args.reps,
        cfg=cfg,
        out=args.out,
        mode=args.mode,
    )


def load_or_generate_matrix(source):
    """poisson2d:K / poisson3d:K generate stencils; anything else is a path."""
    if source.startswith("poisson2d:"):
        return gen_poisson2d(int(source.split(":", 1)[1]))
    if source.startswith("poisson3d:"):
        return gen_poisson3d(int(source.split(":", 1)[1]))
    return load_matrix_market(source)


def run_experiment(spec, quiet=False):
    """Execute the batch: reps runs per variant on paired seeds.

    Writes one CSV row per run, prints the aggregate table, and returns
    (AggregateStats, rows).  A single failed run is recorded as an aborted
    row rather than killing the batch.
    """
    A = load_or_generate_matrix(spec.matrix_source)
    b = spmv(A, np.ones(A.n))  # all-ones exact solution when no rhs is supplied
    precond = build_preconditioner(A, spec.precond)

    rows = []
    for variant in spec.variants:
        runner = RUNNERS[variant]
        for rep in range(spec.reps):
            run_seed = spec.seed + rep
            model = FaultModel(lam=spec.lam, bit_range=spec.bit_range, seed=run_seed)
            try:
                report = runner(A, b, spec.cfg, fault_model=model, precond=precond, mode=spec.mode)
                rows.append(
                    {
                        "variant": variant,
                        "rep": rep,
                        "seed": run_seed,
                        "iterations": report.iterations,
                        "fr": report.fr_count,
                        "rr": report.rr_count,
                        "aborted": int(report.aborted),
                        "final_rel_residual": report.final_rel_residual,
                    }
                )
            except Exception as exc:
                print(f"warning: {variant} rep {rep} failed: {exc}", file=sys.stderr)
                rows.append(
                    {
                        "variant": variant,
                        "rep": rep,
                        "seed": run_seed,
                        "iterations": 0,
                        "fr": 0,
                        "rr": 0,
                        "aborted": 1,
                        "final_rel_residual": float("nan"),
                    }
                )

    write_csv(rows, spec.out)
    stats = aggregate(rows)
    if not quiet:
        print_table(spec, stats)
        print(f"per-run rows written to {spec.out}")
    return stats, rows


def write_csv(rows, path):
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for row in rows:
            writer.writerow(
                [
                    row["variant"],
                    row["rep"],
                    row["seed"],
                    row["iterations"],
                    row["fr"],
                    row["rr"],
                    row["aborted"],
                    repr(float(row["final_rel_residual"])),
                ]
            )


def aggregate(rows):
    """Means over all reps, aborted runs included (they contribute their
    capped iteration counts)."""
    per_variant = {}
    for row in rows:
        per_variant.setdefault(row["variant"], []).append(row)
    stats = {}
    for variant, group in per_variant.items():
        count = len(group)
        stats[variant] = VariantStats(
            mean_fr=sum(r["fr"] for r in group) / count,
            mean_rr=sum(r["rr"] for r in group) / count,
            mean_iterations=sum(r["iterations"] for r in group) / count,
            abort_fraction=sum(r["aborted"] for r in group) / count,
        )
    return AggregateStats(per_variant=stats)


def print_table(spec, stats):
    header = f"{'Problem':<16} {'Iterative solver':<18} {'# RR':<22} {'# FR':<22} {'# Iter':<22} {'% aborted'}"
    print(header)
    print("-" * len(header))
    for variant, vs in stats.per_variant.items():
        print(
            f"{spec.matrix_source:<16} {DISPLAY_NAMES[variant]:<18} "
            f"{vs.mean_rr:<22.15g} {vs.mean_fr:<22.15g} "
            f"{vs.mean_iterations:<22.15g} {vs.abort_fraction * 100:.15g}"
        )


def probe_probabilities(lam, d, samples, seed=0, quiet=False):
    """Analytic clean/one-faulty/both-faulty window probabilities next to
    Monte Carlo estimates over ``samples`` simulated two-replica windows."""
    analytic = (
        p_clean_window(lam, d, 2),
        p_exactly_one_faulty(lam, d),
        p_both_faulty(lam, d),
    )
    rng = np.random.default_rng(seed)
    counts = np.zeros(3, dtype=np.int64)
    remaining = samples
    chunk = 200_000
    while remaining > 0:
        m = min(chunk, remaining)
        faults = rng.poisson(lam, size=(m, 2, d)).sum(axis=2)
        faulty_replicas = (faults > 0).sum(axis=1)
        counts += np.bincount(faulty_replicas, minlength=3)[:3]
        remaining -= m
    empirical = tuple(counts / samples)
    stderr = tuple(math.sqrt(p * (1.0 - p) / samples) for p in analytic)
    report = ProbeReport(
        lam=lam, d=d, samples=samples, analytic=analytic, empirical=empirical, stderr=stderr
    )
    if not quiet:
        print_probe(report)
    return report


def print_probe(report):
    print(
        f"window outcome probabilities: lambda={report.lam:g}, d={report.d}, "
        f"2 replicas, {report.samples} simulated windows"
    )
    header = f"{'outcome':<14} {'analytic':<22} {'monte-carlo':<22} {'stderr':<14} {'sigmas'}"
    print(header)
    print("-" * len(header))
    for name, a, e, s in zip(
        ("clean", "exactly-one", "both"), report.analytic, report.empirical, report.stderr
    ):
        sigmas = abs(e - a) / s if s > 0 else 0.0
        print(f"{name:<14} {a:<22.15g} {e:<22.15g} {s:<14.6g} {sigmas:.2f}")


def main(argv=None):
    request = parse_args(sys.argv[1:] if argv is None else argv)
    try:
        if isinstance(request, ProbeRequest):
            probe_probabilities(request.lam, request.d, request.samples, seed=request.seed)
        else:
            run_experiment(request)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
