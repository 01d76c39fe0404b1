"""Shared fixtures and independent oracle helpers.

The oracles deliberately avoid the library's own kernels: dense expansion of
CSR triplets for matrix products and norms, math.fsum for compensated
reductions, struct for IEEE-754 bit manipulation.
"""

import numpy as np
import pytest

from twincg.sparsemat import CsrMatrix


def dense_from_csr(A):
    """Expand CSR triplets into a dense array (oracle path)."""
    D = np.zeros((A.n, A.n))
    for i in range(A.n):
        for k in range(A.row_ptr[i], A.row_ptr[i + 1]):
            D[i, A.col_idx[k]] += A.values[k]
    return D


def csr_identity(n):
    return CsrMatrix(n, np.arange(n + 1), np.arange(n), np.ones(n))


def csr_diag(entries):
    n = len(entries)
    return CsrMatrix(n, np.arange(n + 1), np.arange(n), np.asarray(entries, dtype=float))


def state_bits_equal(a, b):
    """Field-by-field bit comparison of two solver states."""
    if a.iter != b.iter:
        return False
    for name in ("x", "r", "p", "q"):
        if getattr(a, name).tobytes() != getattr(b, name).tobytes():
            return False
    if (a.z is None) != (b.z is None):
        return False
    if a.z is not None and a.z.tobytes() != b.z.tobytes():
        return False
    return (
        np.float64(a.rho).tobytes() == np.float64(b.rho).tobytes()
        and np.float64(a.res_norm).tobytes() == np.float64(b.res_norm).tobytes()
    )


def state_matches_checkpoint(state, ckpt):
    """Bit comparison restricted to the fields a checkpoint stores."""
    if state.iter != ckpt.iter:
        return False
    for name in ("x", "r", "p"):
        if getattr(state, name).tobytes() != getattr(ckpt, name).tobytes():
            return False
    if (state.z is None) != (ckpt.z is None):
        return False
    if state.z is not None and state.z.tobytes() != ckpt.z.tobytes():
        return False
    return np.float64(state.rho).tobytes() == np.float64(ckpt.rho).tobytes()


@pytest.fixture
def poisson2d_small():
    from twincg.sparsemat import gen_poisson2d

    return gen_poisson2d(10)
