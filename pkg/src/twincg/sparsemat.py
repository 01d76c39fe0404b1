"""Sparse CSR storage, Matrix Market I/O, stencil generators, and the
deterministic vector kernels shared by every solver variant.

All reductions (dot, norm2, SpMxV row sums) use a fixed accumulation order so
that two replicas operating on bit-identical inputs produce bit-identical
binary64 results.  The cheap cross-replica detection check relies on this.
"""

import math

import numpy as np
import scipy.sparse


class MatrixMarketError(ValueError):
    """Malformed Matrix Market input; message carries the offending line."""


class CsrMatrix:
    """Square sparse matrix in canonical compressed-row form.

    Canonical means row_ptr is non-decreasing with row_ptr[0] == 0 and
    row_ptr[n] == nnz, and column indices are strictly increasing within each
    row.  ``values`` may be mutated in place (the fault injector flips bits
    there); ``row_ptr`` and ``col_idx`` are treated as immutable and may be
    shared between replica copies.
    """

    def __init__(self, n, row_ptr, col_idx, values, check=True):
        self.n = int(n)
        self.row_ptr = np.ascontiguousarray(row_ptr, dtype=np.int64)
        self.col_idx = np.ascontiguousarray(col_idx, dtype=np.int64)
        self.values = np.ascontiguousarray(values, dtype=np.float64)
        self._frobenius = None
        self._handle = None
        if check:
            self._validate()

    @property
    def nnz(self):
        return len(self.values)

    def _validate(self):
        n, nnz = self.n, self.nnz
        if n < 1:
            raise ValueError("matrix dimension must be at least 1")
        if len(self.row_ptr) != n + 1:
            raise ValueError("row_ptr must have length n+1")
        if self.row_ptr[0] != 0 or self.row_ptr[-1] != nnz:
            raise ValueError("row_ptr must start at 0 and end at nnz")
        if np.any(np.diff(self.row_ptr) < 0):
            raise ValueError("row_ptr must be non-decreasing")
        if len(self.col_idx) != nnz:
            raise ValueError("col_idx and values must have equal length")
        if nnz and (self.col_idx.min() < 0 or self.col_idx.max() >= n):
            raise ValueError("column index out of range")
        if nnz > 1:
            gaps = np.diff(self.col_idx)
            boundary = np.zeros(nnz - 1, dtype=bool)
            starts = self.row_ptr[1:-1]
            starts = starts[(starts > 0) & (starts < nnz)]
            boundary[starts - 1] = True
            if np.any(gaps[~boundary] <= 0):
                raise ValueError("column indices must be strictly increasing within each row")

    def _scipy(self):
        # The handle is forced to alias self.values so in-place bit flips are
        # visible to the matvec without rebuilding anything.
        if self._handle is None:
            handle = scipy.sparse.csr_matrix(
                (self.values, self.col_idx, self.row_ptr), shape=(self.n, self.n), copy=False
            )
            handle.data = self.values
            self._handle = handle
        return self._handle

    def replica_copy(self):
        """Private copy for one replica: fresh values buffer, shared structure.

        The Frobenius norm is computed now, while the values are known to be
        pristine, so later consistency checks never race a pending bit flip.
        """
        if self._frobenius is None:
            self._frobenius = norm2(self.values)
        clone = CsrMatrix(self.n, self.row_ptr, self.col_idx, self.values.copy(), check=False)
        clone._frobenius = self._frobenius
        return clone

    def diagonal(self):
        """Dense main diagonal; entries absent from the pattern are 0."""
        diag = np.zeros(self.n)
        rows = np.repeat(np.arange(self.n, dtype=np.int64), np.diff(self.row_ptr))
        on_diag = rows == self.col_idx
        diag[rows[on_diag]] = self.values[on_diag]
        return diag


def spmv(A, v):
    """Sparse matrix-vector product A @ v.

    Row sums accumulate in ascending column-index order, so the result is
    bit-deterministic across replicas and runs.
    """
    if len(v) != A.n:
        raise ValueError(f"dimension mismatch: matrix is {A.n}x{A.n}, vector has length {len(v)}")
    return A._scipy() @ v


def dot(a, b):
    """Inner product with a fixed, input-independent accumulation order."""
    if len(a) != len(b):
        raise ValueError(f"dimension mismatch: {len(a)} vs {len(b)}")
    with np.errstate(over="ignore", invalid="ignore"):
        return float(np.add.reduce(a * b))


def norm2(v):
    """Euclidean norm, bit-deterministic (sqrt of the fixed-order dot)."""
    s = dot(v, v)
    if s != s:  # NaN from corrupted data propagates rather than raising
        return float("nan")
    return math.sqrt(s)


def axpy(alpha, x, y):
    """Return alpha * x + y."""
    if len(x) != len(y):
        raise ValueError(f"dimension mismatch: {len(x)} vs {len(y)}")
    with np.errstate(over="ignore", invalid="ignore"):
        return alpha * x + y


def copy_vector(v):
    return np.array(v, dtype=np.float64, copy=True)


def matrix_norm(A):
    """Frobenius norm over the stored nonzeros, cached after first use.

    The cache is only valid for pristine values; callers must not invoke this
    while injected bit flips are outstanding.
    """
    if A._frobenius is None:
        A._frobenius = norm2(A.values)
    return A._frobenius


def is_structurally_symmetric(A):
    """True iff every stored (i, j) has a stored (j, i)."""
    rows = np.repeat(np.arange(A.n, dtype=np.int64), np.diff(A.row_ptr))
    keys = rows * A.n + A.col_idx
    transposed = A.col_idx * A.n + rows
    return np.array_equal(np.sort(keys), np.sort(transposed))


def _assemble_csr(n, rows, cols, vals):
    """Canonical CSR from triplets: row-major sort, duplicates summed."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    vals = np.asarray(vals, dtype=np.float64)
    keys = rows * n + cols
    order = np.argsort(keys, kind="stable")
    keys = keys[order]
    vals = vals[order]
    unique_keys, starts = np.unique(keys, return_index=True)
    summed = np.add.reduceat(vals, starts) if len(vals) else vals
    out_rows = unique_keys // n
    out_cols = unique_keys % n
    row_ptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(row_ptr, out_rows + 1, 1)
    np.cumsum(row_ptr, out=row_ptr)
    return CsrMatrix(n, row_ptr, out_cols, summed)


def load_matrix_market(path):
    """Read a real coordinate Matrix Market file into canonical CSR.

    Symmetric-tagged sources are mirrored to full storage, duplicate entries
    are summed, and indices become 0-based in memory.
    """
    with open(path, "r", encoding="ascii", errors="replace") as fh:
        lines = fh.readlines()

    def fail(lineno, message):
        raise MatrixMarketError(f"{path}:{lineno}: {message}")

    if not lines:
        fail(1, "empty file")
    header = lines[0].split()
    if len(header) != 5 or header[0] != "%%MatrixMarket":
        fail(1, "malformed header: expected '%%MatrixMarket matrix coordinate real <symmetry>'")
    _, obj, fmt, field, symmetry = (tok.lower() for tok in header)
    if obj != "matrix":
        fail(1, f"unsupported object '{obj}'")
    if fmt != "coordinate":
        fail(1, f"unsupported format '{fmt}'")
    if field != "real":
        fail(1, f"unsupported field '{field}'")
    if symmetry not in ("general", "symmetric"):
        fail(1, f"unsupported symmetry '{symmetry}'")

    lineno = 1
    size = None
    for lineno in range(2, len(lines) + 1):
        stripped = lines[lineno - 1].strip()
        if not stripped or stripped.startswith("%"):
            continue
        size = stripped.split()
        break
    if size is None:
        fail(len(lines), "missing size line")
    if len(size) != 3:
        fail(lineno, "size line must be 'rows cols nnz'")
    try:
        n_rows, n_cols, declared = (int(tok) for tok in size)
    except ValueError:
        fail(lineno, "size line must contain integers")
    if n_rows != n_cols:
        fail(lineno, f"matrix is not square ({n_rows}x{n_cols})")
    if n_rows < 1 or declared < 0:
        fail(lineno, "invalid matrix dimensions")

    rows, cols, vals = [], [], []
    seen = 0
    for entry_lineno in range(lineno + 1, len(lines) + 1):
        stripped = lines[entry_lineno - 1].strip()
        if not stripped:
            continue
        if stripped.startswith("%"):
            continue
        if seen == declared:
            fail(entry_lineno, f"more than the declared {declared} entries")
        parts = stripped.split()
        if len(parts) != 3:
            fail(entry_lineno, "entry must be 'row col value'")
        try:
            i = int(parts[0])
            j = int(parts[1])
            v = float(parts[2])
        except ValueError:
            fail(entry_lineno, f"unparsable entry '{stripped}'")
        if not (1 <= i <= n_rows and 1 <= j <= n_cols):
            fail(entry_lineno, f"index ({i}, {j}) outside 1..{n_rows}")
        rows.append(i - 1)
        cols.append(j - 1)
        vals.append(v)
        if symmetry == "symmetric" and i != j:
            rows.append(j - 1)
            cols.append(i - 1)
            vals.append(v)
        seen += 1
    if seen != declared:
        fail(len(lines), f"expected {declared} entries, found {seen}")

    matrix = _assemble_csr(n_rows, rows, cols, vals)
    if symmetry == "symmetric" and not is_structurally_symmetric(matrix):
        raise MatrixMarketError(f"{path}: symmetric-tagged source is not structurally symmetric")
    return matrix


def save_matrix_market(A, path):
    """Write canonical CSR as a general coordinate Matrix Market file.

    Values use repr round-tripping, so load(save(A)) reproduces A bit-exactly.
    """
    with open(path, "w", encoding="ascii") as fh:
        fh.write("%%MatrixMarket matrix coordinate real general\n")
        fh.write(f"{A.n} {A.n} {A.nnz}\n")
        for i in range(A.n):
            for k in range(A.row_ptr[i], A.row_ptr[i + 1]):
                fh.write(f"{i + 1} {A.col_idx[k] + 1} {A.values[k]!r}\n")


def gen_poisson2d(k):
    """5-point Laplacian stencil on a k-by-k grid (n = k^2, SPD)."""
    if k < 2:
        raise ValueError(f"grid side must be at least 2, got {k}")
    row_ptr = [0]
    cols, vals = [], []
    for i in range(k):
        for j in range(k):
            r = i * k + j
            if i > 0:
                cols.append(r - k)
                vals.append(-1.0)
            if j > 0:
                cols.append(r - 1)
                vals.append(-1.0)
            cols.append(r)
            vals.append(4.0)
            if j < k - 1:
                cols.append(r + 1)
                vals.append(-1.0)
            if i < k - 1:
                cols.append(r + k)
                vals.append(-1.0)
            row_ptr.append(len(cols))
    return CsrMatrix(k * k, row_ptr, cols, vals)


def gen_poisson3d(k):
    """7-point Laplacian stencil on a k-by-k-by-k grid (n = k^3, SPD)."""
    if k < 2:
        raise ValueError(f"grid side must be at least 2, got {k}")
    row_ptr = [0]
    cols, vals = [], []
    k2 = k * k
    for i in range(k):
        for j in range(k):
            for l in range(k):
                r = i * k2 + j * k + l
                if i > 0:
                    cols.append(r - k2)
                    vals.append(-1.0)
                if j > 0:
                    cols.append(r - k)
                    vals.append(-1.0)
                if l > 0:
                    cols.append(r - 1)
                    vals.append(-1.0)
                cols.append(r)
                vals.append(6.0)
                if l < k - 1:
                    cols.append(r + 1)
                    vals.append(-1.0)
                if j < k - 1:
                    cols.append(r + k)
                    vals.append(-1.0)
                if i < k - 1:
                    cols.append(r + k2)
                    vals.append(-1.0)
                row_ptr.append(len(cols))
    return CsrMatrix(k * k2, row_ptr, cols, vals)
