import numpy as np
import pytest

from rankshrink import linalg
from rankshrink.errors import RejectedInputError

from oracles import gram_eigvals_by_subspace_iteration, matmul_triple_loop

rng = np.random.default_rng(20240817)


def reconstruction_error(w, f):
    recon = f.u @ np.diag(f.sigma) @ f.vt
    denom = np.linalg.norm(w)
    return np.linalg.norm(recon - w) / denom if denom else np.linalg.norm(recon)


class TestMatmul:
    def test_identity(self):
        a = rng.standard_normal((3, 4))
        assert np.allclose(linalg.matmul(np.eye(3), a), a)

    def test_column_permutation(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[0.0, 1.0], [1.0, 0.0]])
        assert np.array_equal(linalg.matmul(a, b), np.array([[2.0, 1.0], [4.0, 3.0]]))

    def test_matches_triple_loop(self):
        a = rng.standard_normal((7, 5))
        b = rng.standard_normal((5, 3))
        expected = matmul_triple_loop(a, b)
        assert np.max(np.abs(linalg.matmul(a, b) - expected)) < 1e-12

    def test_dimension_mismatch(self):
        with pytest.raises(RejectedInputError):
            linalg.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_rejects_non_finite(self):
        bad = np.array([[1.0, np.nan]])
        with pytest.raises(RejectedInputError):
            linalg.matmul(bad, np.ones((2, 1)))

    def test_rejects_non_2d(self):
        with pytest.raises(RejectedInputError):
            linalg.matmul(np.ones(3), np.ones((3, 1)))


class TestSvd:
    def test_identity(self):
        f = linalg.svd(np.eye(4))
        assert np.allclose(f.sigma, np.ones(4))
        assert reconstruction_error(np.eye(4), f) < 1e-12

    def test_diagonal(self):
        w = np.diag([3.0, 2.0, 1.0])
        f = linalg.svd(w)
        assert np.allclose(f.sigma, [3.0, 2.0, 1.0])
        # Signed permutations: each factor has exactly one +-1 per row/column.
        for mat in (f.u, f.vt):
            assert np.allclose(np.abs(mat) @ np.abs(mat.T), np.eye(3), atol=1e-12)
        assert reconstruction_error(w, f) < 1e-12

    def test_random_rectangular_against_eigen_oracle(self):
        w = rng.standard_normal((50, 80))
        f = linalg.svd(w)
        assert reconstruction_error(w, f) < 1e-8
        oracle = gram_eigvals_by_subspace_iteration(w)
        assert np.max(np.abs(f.sigma - oracle) / oracle[0]) < 1e-6

    def test_orthogonality_both_orientations(self):
        for shape in [(12, 30), (30, 12), (17, 17)]:
            w = rng.standard_normal(shape)
            f = linalg.svd(w)
            r = f.sigma.shape[0]
            assert r == min(shape)
            assert np.max(np.abs(f.u.T @ f.u - np.eye(r))) < 1e-9
            assert np.max(np.abs(f.vt @ f.vt.T - np.eye(r))) < 1e-9

    def test_sigma_descending_and_nonnegative(self):
        for _ in range(10):
            w = rng.standard_normal((rng.integers(1, 40), rng.integers(1, 40)))
            sigma = linalg.svd(w).sigma
            assert np.all(sigma >= 0)
            assert np.all(np.diff(sigma) <= 0)

    def test_deterministic_bit_identical(self):
        w = rng.standard_normal((23, 31))
        f1 = linalg.svd(w)
        f2 = linalg.svd(w)
        assert f1.u.tobytes() == f2.u.tobytes()
        assert f1.sigma.tobytes() == f2.sigma.tobytes()
        assert f1.vt.tobytes() == f2.vt.tobytes()

    def test_sign_convention(self):
        w = rng.standard_normal((9, 6))
        f = linalg.svd(w)
        for k in range(6):
            col = f.u[:, k]
            assert col[np.argmax(np.abs(col))] >= 0

    def test_rank_deficient_input(self):
        w = np.outer(rng.standard_normal(8), rng.standard_normal(5))
        f = linalg.svd(w)
        assert np.sum(f.sigma > 0) == 1
        assert np.max(np.abs(f.u.T @ f.u - np.eye(5))) < 1e-9
        assert np.max(np.abs(f.vt @ f.vt.T - np.eye(5))) < 1e-9
        assert reconstruction_error(w, f) < 1e-8

    def test_matches_lapack_singular_values(self):
        w = rng.standard_normal((40, 25))
        mine = linalg.svd(w).sigma
        ref = np.linalg.svd(w, compute_uv=False)
        assert np.max(np.abs(mine - ref)) < 1e-10 * ref[0]

    def test_rejects_non_finite(self):
        with pytest.raises(RejectedInputError):
            linalg.svd(np.array([[1.0, np.inf], [0.0, 1.0]]))

    def test_factors_are_read_only(self):
        f = linalg.svd(rng.standard_normal((4, 4)))
        with pytest.raises(ValueError):
            f.u[0, 0] = 5.0


class TestTruncate:
    def test_full_rank_reconstructs(self):
        w = rng.standard_normal((10, 7))
        f = linalg.svd(w)
        a, b = linalg.truncate(f, 7)
        assert np.linalg.norm(a @ b - w) / np.linalg.norm(w) < 1e-8

    def test_diagonal_rank_one(self):
        f = linalg.svd(np.diag([3.0, 2.0, 1.0]))
        a, b = linalg.truncate(f, 1)
        assert np.max(np.abs(a @ b - np.diag([3.0, 0.0, 0.0]))) < 1e-10

    def test_tail_energy_identity(self):
        w = rng.standard_normal((10, 10))
        f = linalg.svd(w)
        a, b = linalg.truncate(f, 3)
        err = np.linalg.norm(w - a @ b)
        expected = np.sqrt(np.sum(f.sigma[3:] ** 2))
        assert abs(err - expected) / expected < 1e-8

    def test_tail_energy_identity_random_ranks(self):
        for _ in range(10):
            m = int(rng.integers(2, 30))
            n = int(rng.integers(2, 30))
            w = rng.standard_normal((m, n))
            f = linalg.svd(w)
            k = int(rng.integers(1, min(m, n) + 1))
            a, b = linalg.truncate(f, k)
            err_sq = np.sum((w - a @ b) ** 2)
            expected = np.sum(f.sigma[k:] ** 2)
            assert abs(err_sq - expected) <= 1e-6 * max(expected, 1e-30) + 1e-12

    def test_sqrt_scaling_balances_factors(self):
        w = rng.standard_normal((12, 9))
        f = linalg.svd(w)
        a, b = linalg.truncate(f, 4)
        # Column i of a and row i of b both carry sqrt(sigma_i).
        for i in range(4):
            assert np.isclose(np.linalg.norm(a[:, i]), np.sqrt(f.sigma[i]), rtol=1e-10)
            assert np.isclose(np.linalg.norm(b[i, :]), np.sqrt(f.sigma[i]), rtol=1e-10)

    def test_rank_out_of_range(self):
        f = linalg.svd(np.eye(3))
        with pytest.raises(RejectedInputError):
            linalg.truncate(f, 0)
        with pytest.raises(RejectedInputError):
            linalg.truncate(f, 4)
