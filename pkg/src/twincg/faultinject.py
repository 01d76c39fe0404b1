"""Transient bit-flip injection into matrix nonzeros, with exact undo.

Faults are flips of single bits in the binary64 words of a matrix's values
array: a Poisson-distributed count per iteration, a uniformly chosen nonzero,
and a uniformly chosen bit position.  Flips are applied immediately before
the matrix-vector product of an iteration and undone right after it, so each
corruption is visible to exactly one iteration.  Nothing outside the values
array is ever touched.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np


@dataclass
class FaultModel:
    """lam is the mean fault count per replica per iteration (Poisson rate).

    bit_range is the inclusive interval of flippable bit positions.  The
    default [0, 63] makes every bit equally likely; restricting it to the
    exponent field [52, 62] forces essentially every fault to be significant,
    which the statistical recovery tests rely on.
    """

    lam: float
    bit_range: Tuple[int, int] = (0, 63)
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"fault rate must be non-negative, got {self.lam}")
        lo, hi = self.bit_range
        if not (0 <= lo <= hi <= 63):
            raise ValueError(f"bit range must satisfy 0 <= lo <= hi <= 63, got {lo}:{hi}")


@dataclass(frozen=True)
class FaultEvent:
    """One applied flip; XORing the bit again recovers original_bits."""

    nnz_index: int
    bit: int
    original_bits: int


def replica_rng(model, replica_id):
    """Independent, reproducible stream per replica (seed XOR replica id)."""
    return np.random.default_rng(model.seed ^ replica_id)


def sample_fault_count(model, rng, size=None):
    """Poisson(lam) draw; pass ``size`` for a batch (used by statistics)."""
    if size is None:
        return int(rng.poisson(model.lam))
    return rng.poisson(model.lam, size)


def apply_flips(A, picks):
    """XOR the given (nnz_index, bit) picks into A.values, in order."""
    if A.nnz < 1:
        raise ValueError("matrix has no nonzeros to corrupt")
    words = A.values.view(np.uint64)
    events = []
    for idx, bit in picks:
        if not 0 <= idx < A.nnz:
            raise ValueError(f"nonzero index {idx} out of range")
        if not 0 <= bit <= 63:
            raise ValueError(f"bit position {bit} out of range")
        original = int(words[idx])
        words[idx] = words[idx] ^ np.uint64(1 << bit)
        events.append(FaultEvent(nnz_index=idx, bit=bit, original_bits=original))
    return events


def inject(A, model, rng):
    """Sample and apply this iteration's faults; returns them in order.

    NaN/Inf values produced by exponent flips are legitimate outcomes and
    propagate into the solver.
    """
    count = sample_fault_count(model, rng)
    if count == 0:
        return []
    lo, hi = model.bit_range
    picks = [
        (int(rng.integers(0, A.nnz)), int(rng.integers(lo, hi + 1)))
        for _ in range(count)
    ]
    return apply_flips(A, picks)


def undo(A, events):
    """Unflip in reverse order; restores the values array bit-exactly,
    including repeated hits on the same word."""
    if not events:
        return
    words = A.values.view(np.uint64)
    for event in reversed(events):
        words[event.nnz_index] = words[event.nnz_index] ^ np.uint64(1 << event.bit)


class ScriptedFaults:
    """Deterministic fault schedule for replay tests.

    Maps (replica_id, work_iteration) to a list of (nnz_index, bit) picks.
    Keys use the global work counter, not the solver's iteration index, so a
    scripted fault does not re-fire when iterations are replayed after a
    rollback.
    """

    def __init__(self, schedule):
        self.schedule = {key: tuple(picks) for key, picks in schedule.items()}

    def picks(self, replica_id, work_iter):
        return self.schedule.get((replica_id, work_iter), ())
