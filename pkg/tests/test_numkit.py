import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from numkit import (SOLVE_LEDGER, ContractViolation, ConvergenceError, SparseSymOp, cg_solve,
                    dense_spd_solve, lanczos_eigs, parallel_map, random_stream)


def spd_matrix(n, seed=0):
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (Q * np.linspace(1.0, 50.0, n)) @ Q.T


def test_random_stream_is_reproducible():
    a = random_stream(5, 'bae-m', 3).standard_normal(8)
    b = random_stream(5, 'bae-m', 3).standard_normal(8)
    np.testing.assert_array_equal(a, b)


@given(st.integers(0, 2 ** 31), st.integers(0, 1000))
def test_random_stream_purposes_are_disjoint(seed, index):
    a = random_stream(seed, 'training-m', index).standard_normal(4)
    b = random_stream(seed, 'validation-m', index).standard_normal(4)
    c = random_stream(seed, 'training-m', index + 1).standard_normal(4)
    assert not np.allclose(a, b)
    assert not np.allclose(a, c)


def test_cg_solves_spd_system():
    A = spd_matrix(30)
    b = np.arange(30, dtype=float)
    x = cg_solve(A, b, rtol=1e-12)
    np.testing.assert_allclose(A @ x, b, rtol=1e-8, atol=1e-8)


def test_cg_with_preconditioner_and_callable():
    A = sp.diags(np.linspace(1.0, 1e4, 50)) + sp.eye(50)
    b = np.ones(50)
    inv_diag = 1.0 / A.diagonal()
    result = cg_solve(lambda x: A @ x, b, precond=lambda r: inv_diag * r, rtol=1e-10,
                      return_info=True)
    assert result.converged
    assert result.iterations <= 2
    np.testing.assert_allclose(A @ result.x, b, rtol=1e-8)


def test_cg_zero_rhs_returns_zero():
    result = cg_solve(spd_matrix(5), np.zeros(5), return_info=True)
    assert result.iterations == 0
    np.testing.assert_array_equal(result.x, np.zeros(5))


def test_cg_raises_on_iteration_limit():
    with pytest.raises(ConvergenceError) as info:
        cg_solve(spd_matrix(40), np.ones(40), rtol=1e-14, maxiter=2)
    assert info.value.iterations == 2


def test_cg_non_strict_returns_last_iterate():
    result = cg_solve(spd_matrix(40), np.ones(40), rtol=1e-14, maxiter=2, strict=False,
                      return_info=True)
    assert not result.converged
    assert result.iterations == 2


def test_cg_rejects_indefinite_operator():
    A = np.diag([1.0, -3.0, 1.0])
    with pytest.raises(ContractViolation):
        cg_solve(A, np.ones(3))


def test_cg_rejects_bad_tolerance():
    with pytest.raises(ValueError):
        cg_solve(np.eye(2), np.ones(2), rtol=1.5)


def test_sparse_sym_op_solve_counts_in_ledger():
    A = sp.csr_matrix(spd_matrix(6))
    op = SparseSymOp(A, tag='unit', factorize=True)
    SOLVE_LEDGER.reset()
    x = op.solve(np.ones(6))
    op.solve(np.ones(6), tag='other')
    np.testing.assert_allclose(A @ x, np.ones(6), atol=1e-10)
    assert SOLVE_LEDGER.counts() == {'unit': 1, 'other': 1}
    assert SOLVE_LEDGER.total() == 2
    assert op.symmetry_error() < 1e-12


def test_sparse_sym_op_without_factorization_refuses_solve():
    op = SparseSymOp(sp.eye(3), factorize=False)
    with pytest.raises(ValueError):
        op.solve(np.ones(3))


def test_sparse_sym_op_requires_square_matrix():
    with pytest.raises(ValueError):
        SparseSymOp(sp.csr_matrix(np.ones((2, 3))))


def test_dense_spd_solve():
    A = spd_matrix(7, seed=3)
    b = np.linspace(-1, 1, 7)
    np.testing.assert_allclose(A @ dense_spd_solve(A, b), b, atol=1e-10)


def test_lanczos_matches_dense_eigenvalues():
    A = spd_matrix(25, seed=1)
    pairs = lanczos_eigs(lambda x: A @ x, k=5, dim_hint=25, tol=1e-12)
    expected = np.sort(np.linalg.eigvalsh(A))[::-1][:5]
    np.testing.assert_allclose(pairs.values, expected, rtol=1e-8)
    for i in range(5):
        v = pairs.vectors[:, i]
        np.testing.assert_allclose(A @ v, pairs.values[i] * v, atol=1e-6 * expected[0])


def test_lanczos_generalized_inner_product():
    # C H is self-adjoint in the inner product defined by P = C^-1
    H = spd_matrix(12, seed=2)
    C = spd_matrix(12, seed=5) / 50.0
    P = np.linalg.inv(C)
    pairs = lanczos_eigs(lambda x: C @ (H @ x), k=4, dim_hint=12, inner=lambda x: P @ x, tol=1e-12)
    expected = np.sort(np.real(np.linalg.eigvals(C @ H)))[::-1][:4]
    np.testing.assert_allclose(pairs.values, expected, rtol=1e-7)
    gram = pairs.vectors.T @ P @ pairs.vectors
    np.testing.assert_allclose(gram, np.eye(4), atol=1e-8)


def test_lanczos_rank_deficient_operator_returns_zeros():
    rng = np.random.default_rng(4)
    U = np.linalg.qr(rng.standard_normal((20, 2)))[0]
    A = U @ np.diag([3.0, 1.0]) @ U.T
    pairs = lanczos_eigs(lambda x: A @ x, k=5, dim_hint=20)
    np.testing.assert_allclose(pairs.values[:2], [3.0, 1.0], rtol=1e-8)
    np.testing.assert_array_equal(pairs.values[2:], np.zeros(3))


def test_lanczos_symmetry_probe_rejects_nonsymmetric():
    A = np.triu(np.ones((6, 6)))
    with pytest.raises(ContractViolation):
        lanczos_eigs(lambda x: A @ x, k=2, dim_hint=6)


def test_lanczos_validates_k():
    with pytest.raises(ValueError):
        lanczos_eigs(lambda x: x, k=0, dim_hint=3)


@pytest.mark.parametrize('workers', [1, 4])
def test_parallel_map_keeps_index_order(workers):
    assert parallel_map(lambda i: i * i, 17, workers=workers) == [i * i for i in range(17)]
