"""Fault-tolerant sparse conjugate gradient toolkit.

Dual-replica lock-step CG with forward recovery, plus unprotected,
checkpoint-rollback, and triple-redundancy baselines, a transient bit-flip
fault injector, and an experiment harness for recovery statistics.
"""

from .faultinject import FaultEvent, FaultModel, ScriptedFaults, inject, sample_fault_count, undo
from .resilience import (
    ResilienceConfig,
    RunReport,
    WindowOutcome,
    d1_check,
    d2_check,
    forward_recover,
    p_both_faulty,
    p_clean_window,
    p_exactly_one_faulty,
    p_fault_iter,
    run_online_abft,
    run_standard_cg,
    run_tmr,
    run_twin_cg,
)
from .solver import (
    BreakdownError,
    Checkpoint,
    JacobiPreconditioner,
    SolverState,
    cg_step,
    converged,
    init_state,
    pcg_step,
    restore_checkpoint,
    save_checkpoint,
)
from .sparsemat import (
    CsrMatrix,
    MatrixMarketError,
    axpy,
    dot,
    gen_poisson2d,
    gen_poisson3d,
    load_matrix_market,
    matrix_norm,
    norm2,
    save_matrix_market,
    spmv,
)

__version__ = "0.1.0"
