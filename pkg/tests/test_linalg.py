import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from inrsbm.errors import ConstraintCycleError, LinearSolverError, ParameterError
from inrsbm.linalg import (apply_constraints, constraint_operator, csr_from_triplets, gmres,
                           solve_krylov, ILU0, Identity)


def laplacian(n):
    T = sp.diags([-1, 2, -1], [-1, 0, 1], shape=(n, n))
    return sp.kronsum(T, T).tocsr()


def test_identity_one_iteration():
    b = np.arange(1.0, 6.0)
    for method in ("bicgstab", "gmres"):
        x, st_ = solve_krylov(sp.identity(5), b, method=method)
        np.testing.assert_allclose(x, b)
        assert st_.iterations <= 1


@pytest.mark.parametrize("method", ["bicgstab", "gmres"])
@pytest.mark.parametrize("pre", ["ilu0", "jacobi", "none"])
def test_laplacian_matches_dense(method, pre):
    A = laplacian(16)
    b = np.random.default_rng(0).normal(size=A.shape[0])
    x, st_ = solve_krylov(A, b, method=method, preconditioner=pre, rtol=1e-12, maxit=5000)
    ref = np.linalg.solve(A.toarray(), b)
    assert np.linalg.norm(x - ref) <= 1e-10 * np.linalg.norm(ref)
    assert st_.converged and st_.residual <= 1e-12


def test_singular_never_silent():
    A = laplacian(4).tolil()
    A[3, :] = 0.0
    b = np.ones(16)
    for method, pre in (("bicgstab", "ilu0"), ("gmres", "none"), ("bicgstab", "jacobi")):
        with pytest.raises(LinearSolverError):
            solve_krylov(A.tocsr(), b, method=method, preconditioner=pre, maxit=200)


def test_bad_arguments():
    with pytest.raises(ParameterError):
        solve_krylov(sp.identity(3), np.ones(4))
    with pytest.raises(ParameterError):
        solve_krylov(sp.identity(3), np.ones(3), method="cg")
    with pytest.raises(ParameterError):
        solve_krylov(sp.identity(3), np.ones(3), preconditioner="amg")


def test_ilu0_is_exact_for_tridiagonal():
    # no fill-in, so ILU(0) is the full LU
    A = sp.diags([-1, 3, -1], [-1, 0, 1], shape=(8, 8)).tocsr()
    r = np.random.default_rng(1).normal(size=8)
    np.testing.assert_allclose(ILU0(A)(r), np.linalg.solve(A.toarray(), r), rtol=1e-13)


def test_triplets_sum_duplicates_and_sort():
    A = csr_from_triplets([0, 0, 1, 0], [2, 0, 1, 2], [1.0, 2.0, 3.0, 4.0], (2, 3))
    assert A.has_canonical_format
    np.testing.assert_array_equal(A.toarray(), [[2, 0, 5], [0, 3, 0]])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.integers(0, 200), st.integers(0, 2 ** 31))
def test_matvec_matches_triplets(n, nnz, seed):
    rng = np.random.default_rng(seed)
    r, c, v = rng.integers(0, n, nnz), rng.integers(0, n, nnz), rng.normal(size=nnz)
    A = csr_from_triplets(r, c, v, (n, n))
    x = rng.normal(size=n)
    naive = np.zeros(n)
    for i, j, a in zip(r, c, v):
        naive[i] += a * x[j]
    assert np.allclose(A @ x, naive, rtol=0, atol=1e-14 * max(1.0, np.abs(v).sum() * np.abs(x).max()))


def test_no_constraints_is_identity():
    A = laplacian(3)
    b = np.arange(9.0)
    red = apply_constraints(A, b)
    assert (red.A != A).nnz == 0
    np.testing.assert_array_equal(red.b, b)
    np.testing.assert_array_equal(red.recover(b), b)


def test_single_dirichlet_node():
    A = np.array([[2.0, -1.0], [-1.0, 2.0]])
    red = apply_constraints(A, np.array([1.0, 0.0]), dirichlet={1: 0.25})
    assert red.A.shape == (1, 1)
    x = red.recover(np.linalg.solve(red.A.toarray(), red.b))
    assert x[1] == 0.25
    assert x[0] == pytest.approx((1.0 + 0.25) / 2.0)


def test_hanging_node_hand_fixture():
    A = np.array([[4.0, -1.0, 0.0], [-1.0, 4.0, -1.0], [0.0, -1.0, 4.0]])
    b = np.array([1.0, 2.0, 3.0])
    red = apply_constraints(A, b, constraints={1: [(0, 0.5), (2, 0.5)]})
    # master rows absorb half of the hanging row: [r0 + r1/2, r1/2 + r2]
    np.testing.assert_allclose(red.A.toarray(), [[4.0, 0.0], [0.0, 4.0]])
    np.testing.assert_allclose(red.b, [2.0, 4.0])
    x = red.recover(np.array([0.5, 1.0]))
    np.testing.assert_allclose(x, [0.5, 0.75, 1.0])
    np.testing.assert_allclose(red.op.reduce_vector(np.array([1.0, 2.0, 3.0])), [2.0, 4.0])


def test_constraint_chains_and_cycles():
    op = constraint_operator(4, {1: [(0, 0.5), (2, 0.5)], 2: [(0, 0.5), (3, 0.5)]}, {3: 1.0})
    x = op.recover(np.array([2.0]))
    np.testing.assert_allclose(x, [2.0, 1.75, 1.5, 1.0])
    with pytest.raises(ConstraintCycleError):
        constraint_operator(3, {0: [(1, 1.0)], 1: [(0, 1.0)]})


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_recover_reduce_idempotent(seed):
    rng = np.random.default_rng(seed)
    n = 12
    cons = {3: [(0, 0.5), (1, 0.5)], 7: [(2, 0.25), (4, 0.25), (5, 0.25), (6, 0.25)]}
    op = constraint_operator(n, cons, {11: -0.5})
    x = op.recover(rng.normal(size=len(op.free)))
    # a constraint-satisfying vector is reproduced from its free part
    again = op.recover(x[op.free])
    np.testing.assert_array_equal(again, x)
    assert x[11] == -0.5 and x[3] == pytest.approx(0.5 * (x[0] + x[1]), abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 50), st.integers(0, 2 ** 31))
def test_full_restart_gmres_is_exact(n, seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n, n)) + n * np.eye(n) * rng.choice([-1, 1])
    b = rng.normal(size=n)
    x, st_ = gmres(sp.csr_matrix(A), b, Identity(), rtol=1e-12, maxit=n, restart=n)
    assert st_.converged
    assert np.linalg.norm(A @ x - b) <= 1e-11 * np.linalg.norm(b)
