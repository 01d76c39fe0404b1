"""Replica lifecycle and the lock-step synchronization window.

Replicas iterate independently on private data and rendezvous every ``d``
iterations inside a synchronization window, where a single designated
resolver inspects exchanged residual norms, optionally asks every replica for
its own consistency verdict, and applies recovery copies under mutual
exclusion.  Two engines implement the identical decision sequence:

* ``simulated`` steps replicas round-robin in one execution context and is
  byte-reproducible, the default for experiments and CI;
* ``concurrent`` runs one OS thread per replica with free-running iterations
  between windows and a barrier protocol at each window.

For a fixed seed or fault script the two engines produce identical results.
"""

import threading
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .faultinject import apply_flips, inject, undo
from .sparsemat import norm2
from .solver import BreakdownError, converged, init_state, save_checkpoint, step

DEFAULT_RENDEZVOUS_TIMEOUT = 60.0


class LockstepError(RuntimeError):
    """Lock-step contract violation or rendezvous timeout."""


@dataclass
class SyncWindow:
    """One rendezvous: norms published on entry, verdicts filled lazily."""

    window_iter: int
    exchanged_norms: List[float]
    verdicts: Optional[List[Optional[bool]]] = None
    outcome: object = None
    released: bool = False


class ReplicaHandle:
    """Exclusively owned execution context of one replica.

    Outside a synchronization window no other replica may read or write any
    field; recovery copies happen only inside windows, mediated by the
    resolver.
    """

    def __init__(self, replica_id, state, matrix, b, rng=None, model=None, script=None):
        self.replica_id = replica_id
        self.state = state
        self.matrix = matrix
        self.b = b
        self.rng = rng
        self.model = model
        self.script = script
        self.broken = False
        self.window_fault_count = 0
        self.event_log = []
        self.d2_evaluations = 0


def make_replicas(A, b, count, model=None, script=None, precond=None, x0=None):
    """Build ``count`` replicas with private matrix/vector copies and
    independent RNG streams, all starting from bit-identical states."""
    replicas = []
    for rid in range(count):
        matrix = A.replica_copy()
        b_private = b.copy()
        state = init_state(matrix, b_private, x0=x0, precond=precond)
        rng = np.random.default_rng(model.seed ^ rid) if model is not None else None
        replicas.append(
            ReplicaHandle(rid, state, matrix, b_private, rng=rng, model=model, script=script)
        )
    return replicas


def step_replica(rep, work_iter, precond=None):
    """One lock-step slot for one replica: inject, step (or hold), undo.

    A breakdown freezes the replica's vectors but still advances its
    iteration counter so the lock-step alignment survives; the next window
    treats the frozen replica as failing its consistency verdict.  Faults are
    undone before the function returns, so windows always see the pristine
    matrix.
    """
    events = ()
    if rep.script is not None:
        picks = rep.script.picks(rep.replica_id, work_iter)
        if picks:
            events = apply_flips(rep.matrix, picks)
    elif rep.model is not None and rep.model.lam > 0.0:
        events = inject(rep.matrix, rep.model, rep.rng)
    if events:
        rep.window_fault_count += len(events)
        rep.event_log.extend((work_iter, e.nnz_index, e.bit) for e in events)
    try:
        if rep.broken:
            rep.state.iter += 1
        else:
            step(rep.state, rep.matrix, precond)
    except BreakdownError:
        rep.broken = True
        rep.state.iter += 1
    finally:
        undo(rep.matrix, events)


def rendezvous(replicas, window_iter):
    """Form a window once every replica has completed exactly window_iter
    iterations; anything else is a contract violation, not a recoverable
    fault."""
    for rep in replicas:
        if rep.state.iter != window_iter:
            raise LockstepError(
                f"replica {rep.replica_id} is at iteration {rep.state.iter}, "
                f"expected {window_iter}"
            )
    return SyncWindow(
        window_iter=window_iter,
        exchanged_norms=[rep.state.res_norm for rep in replicas],
    )


def resolve_window(window, replicas, resolver, checkpoint_slot):
    """Run the resolver's decision sequence: cheap norm comparison first,
    per-replica verdicts only on demand, then a single mediated recovery.

    Returns (outcome, checkpoint_ok); the outcome is also recorded on the
    window so every replica observes the same decision.
    """
    if resolver.needs_verdicts(window, replicas):
        window.verdicts = [resolver.replica_verdict(window, rep) for rep in replicas]
    outcome, checkpoint_ok = resolver.finish(window, replicas, checkpoint_slot)
    window.outcome = outcome
    return outcome, checkpoint_ok


def release(window):
    window.released = True


@dataclass
class CheckpointSlot:
    """Single shared checkpoint; replicas are bit-identical when it is taken,
    so one copy serves every replica for rollback."""

    value: object = None


@dataclass
class LockstepResult:
    work_iterations: int
    aborted: bool
    window_log: list = field(default_factory=list)
    window_wait_seconds: float = 0.0


def run_lockstep(
    replicas,
    cfg,
    resolver=None,
    precond=None,
    mode="simulated",
    timeout=DEFAULT_RENDEZVOUS_TIMEOUT,
    window_hook=None,
):
    """Drive replicas to unanimous convergence or the iteration cap.

    The canonical per-slot sequence is: evaluate convergence of every replica
    on its current (post-window) state and stop if unanimous; abort once the
    executed-work counter reaches max_iter; step every replica once; run a
    window when the solver iteration index is a multiple of cfg.d.  After a
    rollback the iteration index drops back but executed work keeps counting,
    so reported iteration totals include replayed work.

    window_hook(window, replicas, checkpoint_slot), if given, runs right
    after each window resolves (test instrumentation).
    """
    if mode == "simulated":
        return _run_simulated(replicas, cfg, resolver, precond, window_hook)
    if mode == "concurrent":
        return _run_threaded(replicas, cfg, resolver, precond, timeout, window_hook)
    raise ValueError(f"unknown mode '{mode}' (expected 'simulated' or 'concurrent')")


def _finish_window(window, decision, replicas, checkpoint_slot, cfg, window_log, work, window_hook):
    """Bookkeeping shared by both engines once a window's outcome is known:
    gated checkpoint refresh, fault-count logging, broken-flag reset."""
    outcome, checkpoint_ok = decision
    window.outcome = outcome
    if checkpoint_ok and window.window_iter % cfg.checkpoint_interval == 0:
        checkpoint_slot.value = save_checkpoint(replicas[0].state)
    counts = tuple(rep.window_fault_count for rep in replicas)
    for rep in replicas:
        rep.window_fault_count = 0
        rep.broken = False
    window_log.append((work, window.window_iter, outcome, counts))
    if window_hook is not None:
        window_hook(window, replicas, checkpoint_slot)


def _run_simulated(replicas, cfg, resolver, precond, window_hook):
    b_norm = norm2(replicas[0].b)
    checkpoint_slot = CheckpointSlot()
    if resolver is not None:
        checkpoint_slot.value = save_checkpoint(replicas[0].state)
    window_log = []
    work = 0
    while True:
        if all(converged(rep.state, b_norm, cfg.tol) for rep in replicas):
            return LockstepResult(work, aborted=False, window_log=window_log)
        if work >= cfg.max_iter:
            return LockstepResult(work, aborted=True, window_log=window_log)
        for rep in replicas:
            step_replica(rep, work, precond)
        work += 1
        it = replicas[0].state.iter
        if resolver is not None and it % cfg.d == 0:
            window = rendezvous(replicas, it)
            decision = resolve_window(window, replicas, resolver, checkpoint_slot)
            release(window)
            _finish_window(
                window, decision, replicas, checkpoint_slot, cfg, window_log, work, window_hook
            )


class _Coordinator:
    """Cross-thread agreement on convergence, and failure propagation.

    Each replica publishes a convergence bit for every work slot.  A replica
    whose own bit is false proceeds immediately (unanimity at that slot is
    already impossible), so threads free-run except near convergence, where a
    converged replica blocks until every peer's bit for that slot is known.
    """

    def __init__(self, count, timeout):
        self.count = count
        self.timeout = timeout
        self.cond = threading.Condition()
        self.bits = [[] for _ in range(count)]
        self.stop_work = None
        self.error = None

    def fail(self, exc):
        with self.cond:
            if self.error is None:
                self.error = exc
            self.cond.notify_all()

    def post_and_decide(self, replica_id, work, flag):
        """Publish this replica's bit; True iff the run stops at ``work``."""
        with self.cond:
            if self.error is not None:
                raise self.error
            assert len(self.bits[replica_id]) == work
            self.bits[replica_id].append(flag)
            self.cond.notify_all()
            if not flag:
                return False
            deadline = time.monotonic() + self.timeout
            while True:
                if self.error is not None:
                    raise self.error
                if self.stop_work == work:
                    return True
                if all(len(bits) > work for bits in self.bits):
                    if all(bits[work] for bits in self.bits):
                        self.stop_work = work
                        self.cond.notify_all()
                        return True
                    return False
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    timeout_error = LockstepError(
                        f"replica {replica_id} timed out waiting for convergence "
                        f"agreement at work slot {work}"
                    )
                    self.error = timeout_error
                    self.cond.notify_all()
                    raise timeout_error
                self.cond.wait(remaining)


class _WindowBus:
    """Per-window exchange slots plus the shared barrier.

    Every slot is written by exactly one thread between two barrier phases,
    so no extra locking is needed.
    """

    def __init__(self, count, timeout):
        self.barrier = threading.Barrier(count)
        self.timeout = timeout
        self.window = None
        self.need_verdicts = False
        self.decision = None

    def wait(self):
        try:
            self.barrier.wait(self.timeout)
        except threading.BrokenBarrierError:
            raise LockstepError("rendezvous barrier broken (peer failure or timeout)") from None


def _run_threaded(replicas, cfg, resolver, precond, timeout, window_hook):
    count = len(replicas)
    b_norm = norm2(replicas[0].b)
    checkpoint_slot = CheckpointSlot()
    if resolver is not None:
        checkpoint_slot.value = save_checkpoint(replicas[0].state)
    coordinator = _Coordinator(count, timeout)
    bus = _WindowBus(count, timeout)
    window_log = []
    results = [None] * count
    waits = [0.0] * count

    def timed_wait(rep_index):
        t0 = time.perf_counter()
        bus.wait()
        waits[rep_index] += time.perf_counter() - t0

    def worker(rep):
        rid = rep.replica_id
        work = 0
        try:
            while True:
                is_converged = converged(rep.state, b_norm, cfg.tol)
                if coordinator.post_and_decide(rid, work, is_converged):
                    results[rid] = (work, False)
                    return
                if work >= cfg.max_iter:
                    results[rid] = (work, True)
                    return
                step_replica(rep, work, precond)
                work += 1
                if resolver is not None and rep.state.iter % cfg.d == 0:
                    # Arrive: all replicas blocked, private state stable.
                    timed_wait(rid)
                    if rid == 0:
                        window = rendezvous(replicas, rep.state.iter)
                        bus.need_verdicts = resolver.needs_verdicts(window, replicas)
                        if bus.need_verdicts:
                            window.verdicts = [None] * count
                        bus.window = window
                    timed_wait(rid)
                    # Each replica computes its own verdict, in parallel,
                    # only when the cheap check demanded it.
                    window = bus.window
                    if bus.need_verdicts:
                        window.verdicts[rid] = resolver.replica_verdict(window, rep)
                    timed_wait(rid)
                    # The designated resolver applies recovery exclusively.
                    if rid == 0:
                        bus.decision = resolver.finish(window, replicas, checkpoint_slot)
                        release(window)
                        _finish_window(
                            window,
                            bus.decision,
                            replicas,
                            checkpoint_slot,
                            cfg,
                            window_log,
                            work,
                            window_hook,
                        )
                    # Depart: recovery visible to everyone before iteration resumes.
                    timed_wait(rid)
        except BaseException as exc:
            coordinator.fail(exc)
            bus.barrier.abort()
            results[rid] = exc

    threads = [
        threading.Thread(target=worker, args=(rep,), name=f"replica-{rep.replica_id}")
        for rep in replicas
    ]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()

    failures = [res for res in results if isinstance(res, BaseException)]
    if failures:
        root = coordinator.error if coordinator.error is not None else failures[0]
        raise root
    if any(res is None for res in results):
        raise LockstepError("replica thread exited without a result")
    first = results[0]
    if any(res != first for res in results):
        raise LockstepError(f"replicas disagree on the run outcome: {results}")
    return LockstepResult(
        work_iterations=first[0],
        aborted=first[1],
        window_log=window_log,
        window_wait_seconds=sum(waits),
    )
