"""Plain and Jacobi-preconditioned conjugate gradient iteration kernels,
solver state, and checkpoint capture/restore.

A step executes the textbook update sequence in a fixed order with the
fixed-order kernels from :mod:`twincg.sparsemat`, so replicas stepping from
bit-identical states stay bit-identical until a fault separates them.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .sparsemat import dot, norm2, spmv


class BreakdownError(RuntimeError):
    """The iteration cannot proceed: <p, q> <= 0 or rho < 0.

    On a healthy SPD system this never happens; injected faults can produce
    it mid-run, so protected drivers treat it as a detected fault rather
    than a crash.
    """


@dataclass
class JacobiPreconditioner:
    """Elementwise inverse of the matrix diagonal (M = diag(A))."""

    inv_diag: np.ndarray

    @classmethod
    def from_matrix(cls, A):
        diag = A.diagonal()
        if np.any(diag <= 0.0):
            raise ValueError("Jacobi preconditioner requires a strictly positive diagonal")
        return cls(inv_diag=1.0 / diag)


@dataclass
class SolverState:
    """All per-iteration vectors and scalars for one replica.

    ``rho`` is <r, r> for plain CG and <r, z> for the preconditioned variant;
    it is the only scalar carried between iterations.  ``res_norm`` always
    equals norm2(r) recomputed after the latest mutation.
    """

    iter: int
    x: np.ndarray
    r: np.ndarray
    p: np.ndarray
    q: np.ndarray
    z: Optional[np.ndarray]
    rho: float
    res_norm: float

    def clone(self):
        return SolverState(
            iter=self.iter,
            x=self.x.copy(),
            r=self.r.copy(),
            p=self.p.copy(),
            q=self.q.copy(),
            z=None if self.z is None else self.z.copy(),
            rho=self.rho,
            res_norm=self.res_norm,
        )


@dataclass(frozen=True)
class Checkpoint:
    """Deep snapshot of a solver state; immutable after capture."""

    iter: int
    x: np.ndarray
    r: np.ndarray
    p: np.ndarray
    z: Optional[np.ndarray]
    rho: float


def init_state(A, b, x0=None, precond=None):
    """Initial state: r = b - A x0, p = r (or p = z = M^-1 r), iter = 0."""
    if len(b) != A.n:
        raise ValueError(f"dimension mismatch: matrix is {A.n}x{A.n}, b has length {len(b)}")
    if x0 is None:
        x0 = np.zeros(A.n)
    elif len(x0) != A.n:
        raise ValueError(f"dimension mismatch: x0 has length {len(x0)}")
    r = b - spmv(A, x0)
    if precond is not None:
        z = precond.inv_diag * r
        p = z.copy()
        rho = dot(r, z)
    else:
        z = None
        p = r.copy()
        rho = dot(r, r)
    return SolverState(
        iter=0,
        x=np.array(x0, dtype=np.float64, copy=True),
        r=r,
        p=p,
        q=np.zeros(A.n),
        z=z,
        rho=rho,
        res_norm=norm2(r),
    )


def cg_step(state, A):
    """One plain CG iteration, lines executed exactly in order.

    Overflow and NaN from fault-corrupted data propagate into the state; only
    <p, q> <= 0 (and a negative carried rho) abort the step, leaving the
    state untouched.
    """
    if state.rho < 0:
        raise BreakdownError(f"rho = {state.rho} < 0 at iteration {state.iter}")
    with np.errstate(over="ignore", invalid="ignore"):
        q = spmv(A, state.p)
        pq = dot(state.p, q)
        if pq <= 0:
            raise BreakdownError(f"<p, q> = {pq} <= 0 at iteration {state.iter}")
        alpha = state.rho / pq
        state.q = q
        state.x = state.x + alpha * state.p
        state.r = state.r - alpha * q
        rho_next = dot(state.r, state.r)
        beta = rho_next / state.rho
        state.p = state.r + beta * state.p
        state.rho = rho_next
    state.iter += 1
    state.res_norm = norm2(state.r)
    return state


def pcg_step(state, A, M):
    """One Jacobi-preconditioned CG iteration (adds z = M^-1 r)."""
    if state.rho < 0:
        raise BreakdownError(f"rho = {state.rho} < 0 at iteration {state.iter}")
    with np.errstate(over="ignore", invalid="ignore"):
        q = spmv(A, state.p)
        pq = dot(state.p, q)
        if pq <= 0:
            raise BreakdownError(f"<p, q> = {pq} <= 0 at iteration {state.iter}")
        alpha = state.rho / pq
        state.q = q
        state.x = state.x + alpha * state.p
        state.r = state.r - alpha * q
        state.z = M.inv_diag * state.r
        rho_next = dot(state.r, state.z)
        beta = rho_next / state.rho
        state.p = state.z + beta * state.p
        state.rho = rho_next
    state.iter += 1
    state.res_norm = norm2(state.r)
    return state


def step(state, A, precond=None):
    """Dispatch to the plain or preconditioned step."""
    if precond is None:
        return cg_step(state, A)
    return pcg_step(state, A, precond)


def save_checkpoint(state):
    return Checkpoint(
        iter=state.iter,
        x=state.x.copy(),
        r=state.r.copy(),
        p=state.p.copy(),
        z=None if state.z is None else state.z.copy(),
        rho=state.rho,
    )


def restore_checkpoint(state, checkpoint):
    """Overwrite ``state`` with a deep copy of the checkpoint.

    The scratch vector q is zeroed (it is rebuilt at the top of the next
    step) and res_norm is recomputed, which reproduces the value cached at
    save time bit-exactly because r is restored bit-exactly.
    """
    if len(checkpoint.x) != len(state.x):
        raise ValueError("checkpoint is from a different problem size")
    state.iter = checkpoint.iter
    state.x = checkpoint.x.copy()
    state.r = checkpoint.r.copy()
    state.p = checkpoint.p.copy()
    state.z = None if checkpoint.z is None else checkpoint.z.copy()
    state.rho = checkpoint.rho
    state.q = np.zeros_like(state.x)
    state.res_norm = norm2(state.r)
    return state


def converged(state, b_norm, tol):
    """Relative criterion |r| <= tol * |b|; NaN compares false (not converged)."""
    return state.res_norm <= tol * b_norm
