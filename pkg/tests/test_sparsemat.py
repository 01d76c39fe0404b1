import math

import numpy as np
import pytest

from twincg.sparsemat import (
    CsrMatrix,
    MatrixMarketError,
    axpy,
    copy_vector,
    dot,
    gen_poisson2d,
    gen_poisson3d,
    is_structurally_symmetric,
    load_matrix_market,
    matrix_norm,
    norm2,
    save_matrix_market,
    spmv,
)

from conftest import csr_diag, csr_identity, dense_from_csr


class TestSpmv:
    def test_identity(self):
        A = csr_identity(3)
        v = np.array([1.0, 2.0, 3.0])
        assert np.array_equal(spmv(A, v), v)

    def test_diagonal_scaling(self):
        A = csr_diag([2.0, 2.0])
        assert np.array_equal(spmv(A, np.array([3.0, -1.0])), np.array([6.0, -2.0]))

    def test_poisson_stencil_against_dense_oracle(self):
        A = gen_poisson2d(3)
        v = np.ones(A.n)
        expected = dense_from_csr(A) @ v
        result = spmv(A, v)
        assert np.array_equal(result, expected)
        assert result[4] == 0.0  # center row of the 3x3 grid: 4 - 4 neighbors

    def test_dimension_mismatch(self):
        A = csr_identity(3)
        with pytest.raises(ValueError, match="dimension mismatch"):
            spmv(A, np.ones(4))

    def test_bit_deterministic(self):
        A = gen_poisson2d(7)
        rng = np.random.default_rng(3)
        v = rng.standard_normal(A.n)
        first = spmv(A, v)
        for _ in range(3):
            assert spmv(A, v).tobytes() == first.tobytes()
        assert spmv(A.replica_copy(), v).tobytes() == first.tobytes()


class TestNorm2:
    def test_zero_vector(self):
        assert norm2(np.zeros(3)) == 0.0

    def test_pythagorean(self):
        assert norm2(np.array([3.0, 4.0])) == 5.0

    def test_matches_compensated_oracle_within_one_ulp(self):
        rng = np.random.default_rng(11)
        v = rng.standard_normal(100)
        oracle = math.sqrt(math.fsum(float(x) * float(x) for x in v))
        assert abs(norm2(v) - oracle) <= math.ulp(oracle)

    def test_bit_deterministic(self):
        rng = np.random.default_rng(5)
        v = rng.standard_normal(500)
        bits = np.float64(norm2(v)).tobytes()
        assert all(np.float64(norm2(v)).tobytes() == bits for _ in range(5))

    def test_nan_propagates(self):
        assert math.isnan(norm2(np.array([1.0, float("nan")])))


class TestDotAxpy:
    def test_dot_trivial(self):
        assert dot(np.array([1.0, 2.0]), np.array([3.0, 4.0])) == 11.0

    def test_axpy_trivial(self):
        out = axpy(2.0, np.array([1.0, 1.0]), np.array([0.0, 1.0]))
        assert np.array_equal(out, np.array([2.0, 3.0]))

    def test_dot_against_compensated_oracle(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal(1000)
        b = rng.standard_normal(1000)
        oracle = math.fsum(float(x) * float(y) for x, y in zip(a, b))
        assert abs(dot(a, b) - oracle) <= 1e-12 * abs(oracle)

    def test_dot_self_nonnegative(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            v = rng.standard_normal(64)
            assert dot(v, v) >= 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension mismatch"):
            dot(np.ones(2), np.ones(3))
        with pytest.raises(ValueError, match="dimension mismatch"):
            axpy(1.0, np.ones(2), np.ones(3))

    def test_copy_vector_is_independent(self):
        v = np.array([1.0, 2.0])
        w = copy_vector(v)
        w[0] = 9.0
        assert v[0] == 1.0


class TestMatrixNorm:
    def test_identity(self):
        assert matrix_norm(csr_identity(4)) == 2.0

    def test_diagonal(self):
        assert matrix_norm(csr_diag([3.0, 4.0])) == 5.0

    def test_poisson_against_dense_oracle(self):
        A = gen_poisson2d(3)
        oracle = math.sqrt(math.fsum(float(x) ** 2 for x in dense_from_csr(A).ravel()))
        assert abs(matrix_norm(A) - oracle) <= 1e-14 * oracle

    def test_positive_for_any_nonzero_matrix(self):
        assert matrix_norm(csr_diag([-0.5])) > 0.0

    def test_cached_and_shared_with_replica_copy(self):
        A = gen_poisson2d(4)
        first = matrix_norm(A)
        assert matrix_norm(A) == first
        assert matrix_norm(A.replica_copy()) == first


class TestMatrixMarket:
    def test_symmetric_lower_triangle_is_mirrored(self, tmp_path):
        path = tmp_path / "sym.mtx"
        path.write_text(
            "%%MatrixMarket matrix coordinate real symmetric\n"
            "2 2 3\n"
            "1 1 2.0\n"
            "2 1 -1.0\n"
            "2 2 2.0\n"
        )
        A = load_matrix_market(path)
        assert A.n == 2 and A.nnz == 4
        assert np.array_equal(dense_from_csr(A), np.array([[2.0, -1.0], [-1.0, 2.0]]))
        assert is_structurally_symmetric(A)

    def test_pattern_field_rejected(self, tmp_path):
        path = tmp_path / "pattern.mtx"
        path.write_text("%%MatrixMarket matrix coordinate pattern general\n2 2 1\n1 1\n")
        with pytest.raises(MatrixMarketError, match="unsupported field 'pattern'"):
            load_matrix_market(path)

    def test_integer_field_rejected(self, tmp_path):
        path = tmp_path / "int.mtx"
        path.write_text("%%MatrixMarket matrix coordinate integer general\n1 1 1\n1 1 2\n")
        with pytest.raises(MatrixMarketError, match="unsupported field 'integer'"):
            load_matrix_market(path)

    def test_malformed_header_reports_line(self, tmp_path):
        path = tmp_path / "bad.mtx"
        path.write_text("%%NotMatrixMarket\n1 1 0\n")
        with pytest.raises(MatrixMarketError, match=r":1: malformed header"):
            load_matrix_market(path)

    def test_non_square_rejected_with_line(self, tmp_path):
        path = tmp_path / "rect.mtx"
        path.write_text("%%MatrixMarket matrix coordinate real general\n2 3 1\n1 1 1.0\n")
        with pytest.raises(MatrixMarketError, match=r":2: matrix is not square"):
            load_matrix_market(path)

    def test_unparsable_entry_reports_line(self, tmp_path):
        path = tmp_path / "junk.mtx"
        path.write_text(
            "%%MatrixMarket matrix coordinate real general\n% comment\n2 2 1\nx y z\n"
        )
        with pytest.raises(MatrixMarketError, match=r":4: unparsable entry"):
            load_matrix_market(path)

    def test_index_out_of_range_reports_line(self, tmp_path):
        path = tmp_path / "range.mtx"
        path.write_text("%%MatrixMarket matrix coordinate real general\n2 2 1\n3 1 1.0\n")
        with pytest.raises(MatrixMarketError, match=r":3: index \(3, 1\)"):
            load_matrix_market(path)

    def test_missing_entries_rejected(self, tmp_path):
        path = tmp_path / "short.mtx"
        path.write_text("%%MatrixMarket matrix coordinate real general\n2 2 2\n1 1 1.0\n")
        with pytest.raises(MatrixMarketError, match="expected 2 entries, found 1"):
            load_matrix_market(path)

    def test_duplicates_are_summed(self, tmp_path):
        path = tmp_path / "dup.mtx"
        path.write_text(
            "%%MatrixMarket matrix coordinate real general\n"
            "2 2 3\n"
            "1 1 1.5\n"
            "1 1 0.5\n"
            "2 2 1.0\n"
        )
        A = load_matrix_market(path)
        assert A.nnz == 2
        assert A.values[0] == 2.0

    def test_write_and_reload_is_idempotent(self, tmp_path):
        rng = np.random.default_rng(17)
        A = gen_poisson2d(5)
        A.values[:] = rng.standard_normal(A.nnz)  # exercise full binary64 payloads
        first = tmp_path / "a.mtx"
        second = tmp_path / "b.mtx"
        save_matrix_market(A, first)
        B = load_matrix_market(first)
        save_matrix_market(B, second)
        C = load_matrix_market(second)
        assert B.values.tobytes() == A.values.tobytes()
        assert C.values.tobytes() == B.values.tobytes()
        assert np.array_equal(B.row_ptr, A.row_ptr) and np.array_equal(B.col_idx, A.col_idx)


class TestGenerators:
    def test_poisson2d_smallest_grid(self):
        A = gen_poisson2d(2)
        assert A.n == 4
        D = dense_from_csr(A)
        assert np.array_equal(np.diag(D), np.full(4, 4.0))
        assert D[0, 1] == -1.0 and D[0, 2] == -1.0 and D[0, 3] == 0.0

    def test_poisson2d_is_spd(self):
        A = gen_poisson2d(10)
        eigenvalues = np.linalg.eigvalsh(dense_from_csr(A))
        assert eigenvalues.min() > 0.0

    def test_poisson2d_exactly_symmetric(self):
        A = gen_poisson2d(6)
        D = dense_from_csr(A)
        assert np.array_equal(D, D.T)
        assert is_structurally_symmetric(A)

    def test_poisson3d_diagonal_is_six(self):
        A = gen_poisson3d(3)
        assert A.n == 27
        assert np.array_equal(np.diag(dense_from_csr(A)), np.full(27, 6.0))

    def test_poisson3d_exactly_symmetric(self):
        D = dense_from_csr(gen_poisson3d(3))
        assert np.array_equal(D, D.T)

    @pytest.mark.parametrize("gen", [gen_poisson2d, gen_poisson3d])
    def test_grid_too_small_rejected(self, gen):
        with pytest.raises(ValueError, match="at least 2"):
            gen(1)


class TestCsrValidation:
    def test_row_ptr_must_cover_nnz(self):
        with pytest.raises(ValueError, match="row_ptr"):
            CsrMatrix(2, [0, 1, 1], [0, 1], [1.0, 2.0])

    def test_column_out_of_range(self):
        with pytest.raises(ValueError, match="column index out of range"):
            CsrMatrix(2, [0, 1, 2], [0, 2], [1.0, 2.0])

    def test_columns_must_increase_within_row(self):
        with pytest.raises(ValueError, match="strictly increasing"):
            CsrMatrix(2, [0, 2, 2], [1, 0], [1.0, 2.0])

    def test_replica_copy_shares_structure_but_not_values(self):
        A = gen_poisson2d(3)
        B = A.replica_copy()
        assert B.row_ptr is A.row_ptr and B.col_idx is A.col_idx
        B.values[0] = 123.0
        assert A.values[0] != 123.0
