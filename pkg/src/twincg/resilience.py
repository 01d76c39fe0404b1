"""Detection checks, recovery actions, the four solver-variant drivers, and
the closed-form window-outcome probability model.

Two detection mechanisms cooperate.  The cheap one (d1) compares the residual
norms of two replicas: fault-free replicas are bit-identical, so any gap at
or above the threshold means a significant fault hit at least one of them;
sub-threshold divergence is deliberately ignored, which makes the threshold a
significance filter for bit flips.  The expensive one (d2) checks a single
replica's algebraic consistency |b - A x - r| / |A| and costs one extra
matrix-vector product, so it runs only when d1 already flagged a problem.

Recovery is forward when exactly one replica is inconsistent (the healthy
state is copied over, losing no iterations) and rollback to the shared
checkpoint when all replicas are suspect.
"""

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .sparsemat import matrix_norm, norm2, spmv
from .solver import JacobiPreconditioner, restore_checkpoint
from .twinruntime import make_replicas, run_lockstep

VARIANTS = ("standard", "online-abft", "twincg", "tmr")

NO_SIGNIFICANT_FAULT = "no_significant_fault"
FORWARD_RECOVERED = "forward_recovered"
ROLLED_BACK = "rolled_back"
CONTINUED_BOTH_PASSED_D2 = "continued_both_passed_d2"


@dataclass(frozen=True)
class WindowOutcome:
    kind: str
    faulty_replica: Optional[int] = None

    def __str__(self):
        if self.kind == FORWARD_RECOVERED:
            return f"{self.kind}({self.faulty_replica})"
        return self.kind


@dataclass
class ResilienceConfig:
    """Detection/checkpoint cadence and thresholds.

    Defaults: detection every 5 iterations, checkpoint every 10, norm-gap
    threshold 1e-15, consistency threshold 1e-10, convergence tolerance
    1e-10, abort at 6000 iterations.
    """

    d: int = 5
    checkpoint_interval: int = 10
    eps1: float = 1e-15
    eps2: float = 1e-10
    tol: float = 1e-10
    max_iter: int = 6000

    def __post_init__(self):
        if self.d < 1:
            raise ValueError(f"detection interval must be >= 1, got {self.d}")
        if self.checkpoint_interval % self.d != 0:
            raise ValueError(
                f"checkpoint interval {self.checkpoint_interval} must be a multiple of d={self.d}"
            )
        if not (self.eps1 > 0 and self.eps2 > 0 and self.tol > 0):
            raise ValueError("thresholds must be positive")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")


@dataclass
class RunReport:
    """Outcome of one run; aggregated by the experiment harness."""

    variant: str
    iterations: int
    fr_count: int
    rr_count: int
    aborted: bool
    final_rel_residual: float
    wall_events: List[Tuple[int, WindowOutcome]] = field(default_factory=list)
    final_x: Optional[np.ndarray] = None
    window_log: list = field(default_factory=list)
    fault_events: list = field(default_factory=list)
    d2_evaluations: int = 0
    window_wait_seconds: float = 0.0


def d1_check(norm_a, norm_b, eps1):
    """Cheap cross-replica detection: residual norms agree to within eps1.

    NaN on either side compares false, i.e. counts as a detection, which is
    exactly what a fault that exploded a norm deserves.  Symmetric in its
    arguments.
    """
    return abs(norm_a - norm_b) < eps1


def d2_check(A, b, state, eps2):
    """Per-replica consistency check: |b - A x - r| / |A| < eps2.

    Costs one matrix-vector product.  Must be evaluated against the pristine
    matrix (fault undo runs before every window).  A NaN gap fails the check.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        gap = norm2(b - spmv(A, state.x) - state.r) / matrix_norm(A)
    return gap < eps2


def forward_recover(healthy, faulty):
    """Copy the healthy replica's entire state over the faulty one, bit-exact.

    No iterations are lost: both replicas resume from the same point.
    """
    if len(healthy.x) != len(faulty.x):
        raise ValueError("replica states have mismatched problem sizes")
    faulty.iter = healthy.iter
    faulty.x = healthy.x.copy()
    faulty.r = healthy.r.copy()
    faulty.p = healthy.p.copy()
    faulty.q = healthy.q.copy()
    faulty.z = None if healthy.z is None else healthy.z.copy()
    faulty.rho = healthy.rho
    faulty.res_norm = healthy.res_norm


# Closed-form window-outcome probabilities, for a per-replica fault rate lam
# (mean faults per iteration, Poisson arrivals) and detection interval d.


def p_fault_iter(lam, k_replicas):
    """Probability that at least one of k replicas faults in one iteration."""
    if not 0 <= lam < 1:
        raise ValueError(f"fault rate must be in [0, 1), got {lam}")
    return 1.0 - (1.0 - lam) ** k_replicas


def p_clean_window(lam, d, k_replicas):
    """No fault in any of k replicas across d iterations: e^(-lam*d*k)."""
    _check_window_args(lam, d)
    return math.exp(-lam * d * k_replicas)


def p_exactly_one_faulty(lam, d):
    """Exactly one of two replicas faults within d iterations."""
    _check_window_args(lam, d)
    clean = math.exp(-lam * d)
    return 2.0 * clean * (1.0 - clean)


def p_both_faulty(lam, d):
    """Both replicas fault within d iterations."""
    _check_window_args(lam, d)
    return (1.0 - math.exp(-lam * d)) ** 2


def _check_window_args(lam, d):
    if not 0 <= lam < 1:
        raise ValueError(f"fault rate must be in [0, 1), got {lam}")
    if d < 1:
        raise ValueError(f"detection interval must be >= 1, got {d}")


class _TwinResolver:
    """Window logic for two replicas.

    Norm comparison first; on mismatch each replica runs its own consistency
    verdict.  Exactly one inconsistent replica is forward-recovered from its
    peer; two inconsistent replicas roll both back to the shared checkpoint;
    two consistent replicas continue untouched (the divergence is
    unexplained, so that window never refreshes the checkpoint).
    """

    def __init__(self, cfg):
        self.cfg = cfg
        self.fr_count = 0
        self.rr_count = 0

    def needs_verdicts(self, window, replicas):
        return not d1_check(window.exchanged_norms[0], window.exchanged_norms[1], self.cfg.eps1)

    def replica_verdict(self, window, rep):
        rep.d2_evaluations += 1
        if rep.broken:
            return False
        return d2_check(rep.matrix, rep.b, rep.state, self.cfg.eps2)

    def finish(self, window, replicas, checkpoint_slot):
        if window.verdicts is None:
            return WindowOutcome(NO_SIGNIFICANT_FAULT), True
        ok_a, ok_b = window.verdicts
        if ok_a and ok_b:
            return WindowOutcome(CONTINUED_BOTH_PASSED_D2), False
        if ok_a != ok_b:
            healthy, faulty = (0, 1) if ok_a else (1, 0)
            forward_recover(replicas[healthy].state, replicas[faulty].state)
            self.fr_count += 1
            return WindowOutcome(FORWARD_RECOVERED, faulty_replica=faulty), False
        for rep in replicas:
            restore_checkpoint(rep.state, checkpoint_slot.value)
        self.rr_count += 1
        return WindowOutcome(ROLLED_BACK), False


class _OnlineAbftResolver:
    """Single-replica protection: the consistency check runs every window and
    a failure rolls back to the last checkpoint."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.fr_count = 0
        self.rr_count = 0

    def needs_verdicts(self, window, replicas):
        return True

    def replica_verdict(self, window, rep):
        rep.d2_evaluations += 1
        if rep.broken:
            return False
        return d2_check(rep.matrix, rep.b, rep.state, self.cfg.eps2)

    def finish(self, window, replicas, checkpoint_slot):
        if window.verdicts[0]:
            return WindowOutcome(NO_SIGNIFICANT_FAULT), True
        restore_checkpoint(replicas[0].state, checkpoint_slot.value)
        self.rr_count += 1
        return WindowOutcome(ROLLED_BACK), False


class _TmrResolver:
    """Three replicas vote by pairwise norm agreement; no consistency check
    is needed because an odd replica is identified directly by majority.

    A replica frozen by breakdown publishes NaN, which disagrees with
    everything.  Chain patterns without a clean majority are treated as an
    all-disagree rollback (conservative).
    """

    def __init__(self, cfg):
        self.cfg = cfg
        self.fr_count = 0
        self.rr_count = 0

    def needs_verdicts(self, window, replicas):
        return False

    def replica_verdict(self, window, rep):  # pragma: no cover - never scheduled
        raise AssertionError("majority voting needs no per-replica verdicts")

    def finish(self, window, replicas, checkpoint_slot):
        norms = [
            float("nan") if rep.broken else norm
            for norm, rep in zip(window.exchanged_norms, replicas)
        ]
        agree = [
            [i != j and d1_check(norms[i], norms[j], self.cfg.eps1) for j in range(3)]
            for i in range(3)
        ]
        degree = [sum(row) for row in agree]
        if all(deg == 2 for deg in degree):
            return WindowOutcome(NO_SIGNIFICANT_FAULT), True
        if degree.count(0) == 1:
            faulty = degree.index(0)
            others = [i for i in range(3) if i != faulty]
            if agree[others[0]][others[1]]:
                forward_recover(replicas[others[0]].state, replicas[faulty].state)
                self.fr_count += 1
                return WindowOutcome(FORWARD_RECOVERED, faulty_replica=faulty), False
        for rep in replicas:
            restore_checkpoint(rep.state, checkpoint_slot.value)
        self.rr_count += 1
        return WindowOutcome(ROLLED_BACK), False


_RESOLVERS = {
    "standard": None,
    "online-abft": _OnlineAbftResolver,
    "twincg": _TwinResolver,
    "tmr": _TmrResolver,
}

_REPLICA_COUNT = {"standard": 1, "online-abft": 1, "twincg": 2, "tmr": 3}


def _run_variant(
    variant,
    A,
    b,
    cfg,
    fault_model=None,
    precond=None,
    x0=None,
    mode="simulated",
    script=None,
    timeout=60.0,
    window_hook=None,
):
    count = _REPLICA_COUNT[variant]
    replicas = make_replicas(
        A, b, count, model=fault_model, script=script, precond=precond, x0=x0
    )
    resolver_cls = _RESOLVERS[variant]
    resolver = resolver_cls(cfg) if resolver_cls is not None else None
    result = run_lockstep(
        replicas,
        cfg,
        resolver=resolver,
        precond=precond,
        mode=mode,
        timeout=timeout,
        window_hook=window_hook,
    )
    lead = replicas[0]
    with np.errstate(over="ignore", invalid="ignore"):
        final_rel = norm2(lead.b - spmv(lead.matrix, lead.state.x)) / norm2(lead.b)
    return RunReport(
        variant=variant,
        iterations=result.work_iterations,
        fr_count=resolver.fr_count if resolver else 0,
        rr_count=resolver.rr_count if resolver else 0,
        aborted=result.aborted,
        final_rel_residual=final_rel,
        wall_events=[(it, outcome) for (_, it, outcome, _) in result.window_log],
        final_x=lead.state.x.copy(),
        window_log=result.window_log,
        fault_events=[list(rep.event_log) for rep in replicas],
        d2_evaluations=sum(rep.d2_evaluations for rep in replicas),
        window_wait_seconds=result.window_wait_seconds,
    )


def run_standard_cg(A, b, cfg, fault_model=None, **kwargs):
    """Unprotected (P)CG under fault injection: no detection, no recovery.

    A breakdown permanently freezes the run, which then idles to the
    iteration cap and is recorded as aborted.
    """
    return _run_variant("standard", A, b, cfg, fault_model, **kwargs)


def run_online_abft(A, b, cfg, fault_model=None, **kwargs):
    """Single replica with periodic consistency checks and rollback."""
    return _run_variant("online-abft", A, b, cfg, fault_model, **kwargs)


def run_twin_cg(A, b, cfg, fault_model=None, **kwargs):
    """Two lock-stepped replicas with forward recovery and rollback fallback."""
    return _run_variant("twincg", A, b, cfg, fault_model, **kwargs)


def run_tmr(A, b, cfg, fault_model=None, **kwargs):
    """Three lock-stepped replicas with majority-vote forward recovery;
    correctness-comparison baseline only."""
    return _run_variant("tmr", A, b, cfg, fault_model, **kwargs)


RUNNERS = {
    "standard": run_standard_cg,
    "online-abft": run_online_abft,
    "twincg": run_twin_cg,
    "tmr": run_tmr,
}


def build_preconditioner(A, name):
    if name == "none":
        return None
    if name == "jacobi":
        return JacobiPreconditioner.from_matrix(A)
    raise ValueError(f"unknown preconditioner '{name}' (expected 'none' or 'jacobi')")
