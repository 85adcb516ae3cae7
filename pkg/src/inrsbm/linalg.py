"""Sparse storage, preconditioned Krylov solvers and constraint condensation.

Matrices are ``scipy.sparse.csr_matrix`` with sorted, duplicate-free column
indices. The Krylov iterations and the ILU(0) factorisation are implemented
here; scipy is only used as the container.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.sparse as sp

from .errors import (BreakdownError, ConstraintCycleError, KrylovNonConvergence, ParameterError,
                     ZeroPivotError)


def csr_from_triplets(rows, cols, vals, shape) -> sp.csr_matrix:
    """Sum duplicate (row, col) entries into a canonical CSR matrix."""
    A = sp.coo_matrix((np.asarray(vals, float), (np.asarray(rows), np.asarray(cols))), shape=shape)
    A = A.tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return A


def as_csr(A) -> sp.csr_matrix:
    A = sp.csr_matrix(A, dtype=np.float64)
    A.sum_duplicates()
    A.sort_indices()
    return A


# ----------------------------------------------------------------- ILU(0)

@numba.njit(cache=True)
def _ilu0_factor(indptr, indices, data):
    n = len(indptr) - 1
    lu = data.copy()
    diag = np.empty(n, dtype=np.int64)
    for i in range(n):
        diag[i] = -1
        for k in range(indptr[i], indptr[i + 1]):
            if indices[k] == i:
                diag[i] = k
                break
        if diag[i] < 0:
            return lu, diag, i
    pos = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        for k in range(indptr[i], indptr[i + 1]):
            pos[indices[k]] = k
        for k in range(indptr[i], indptr[i + 1]):
            j = indices[k]
            if j >= i:
                break
            piv = lu[diag[j]]
            if piv == 0.0:
                return lu, diag, j
            lu[k] /= piv
            mult = lu[k]
            for kk in range(diag[j] + 1, indptr[j + 1]):
                p = pos[indices[kk]]
                if p >= 0:
                    lu[p] -= mult * lu[kk]
        for k in range(indptr[i], indptr[i + 1]):
            pos[indices[k]] = -1
        if lu[diag[i]] == 0.0:
            return lu, diag, i
    return lu, diag, -1


@numba.njit(cache=True)
def _ilu0_solve(indptr, indices, lu, diag, b):
    n = len(b)
    y = b.copy()
    for i in range(n):
        acc = y[i]
        for k in range(indptr[i], diag[i]):
            acc -= lu[k] * y[indices[k]]
        y[i] = acc
    for i in range(n - 1, -1, -1):
        acc = y[i]
        for k in range(diag[i] + 1, indptr[i + 1]):
            acc -= lu[k] * y[indices[k]]
        y[i] = acc / lu[diag[i]]
    return y


class ILU0:
    """Incomplete LU with the sparsity pattern of A (no fill)."""

    def __init__(self, A):
        A = as_csr(A)
        self.indptr, self.indices = A.indptr.astype(np.int64), A.indices.astype(np.int64)
        self.lu, self.diag, bad = _ilu0_factor(self.indptr, self.indices, A.data.astype(np.float64))
        if bad >= 0:
            raise ZeroPivotError(f"zero pivot in ILU(0) at row {bad}")

    def __call__(self, r):
        return _ilu0_solve(self.indptr, self.indices, self.lu, self.diag, np.asarray(r, np.float64))


class Jacobi:
    def __init__(self, A):
        d = as_csr(A).diagonal()
        zero = np.flatnonzero(d == 0)
        if len(zero):
            raise ZeroPivotError(f"zero diagonal entry at row {zero[0]}")
        self.inv = 1.0 / d

    def __call__(self, r):
        return self.inv * r


class Identity:
    def __init__(self, A=None):
        pass

    def __call__(self, r):
        return np.array(r, dtype=np.float64)


PRECONDITIONERS = {"ilu0": ILU0, "jacobi": Jacobi, "none": Identity}


# ---------------------------------------------------------------- Krylov

@dataclass
class KrylovStats:
    method: str
    iterations: int = 0
    residual: float = math.nan
    converged: bool = False
    history: list = field(default_factory=list)


def bicgstab(A, b, M, rtol=1e-10, maxit=1000, x0=None):
    """Right-preconditioned BiCGStab; returns (x, stats)."""
    stats = KrylovStats("bicgstab")
    bnorm = np.linalg.norm(b)
    x = np.zeros_like(b) if x0 is None else x0.copy()
    if bnorm == 0:
        stats.residual, stats.converged = 0.0, True
        return np.zeros_like(b), stats
    r = b - A @ x
    rhat = r.copy()
    rho_old = alpha = omega = 1.0
    v = np.zeros_like(b)
    p = np.zeros_like(b)
    tol = rtol * bnorm
    res = np.linalg.norm(r)
    stats.history.append(res / bnorm)
    if res <= tol:
        stats.residual, stats.converged = res / bnorm, True
        return x, stats
    for it in range(1, maxit + 1):
        rho = rhat @ r
        if rho == 0.0 or not np.isfinite(rho):
            raise BreakdownError(f"bicgstab breakdown (rho = {rho}) at iteration {it}")
        if it == 1:
            p = r.copy()
        else:
            beta = (rho / rho_old) * (alpha / omega)
            p = r + beta * (p - omega * v)
        phat = M(p)
        v = A @ phat
        denom = rhat @ v
        if denom == 0.0 or not np.isfinite(denom):
            raise BreakdownError(f"bicgstab breakdown (rhat.v = {denom}) at iteration {it}")
        alpha = rho / denom
        s = r - alpha * v
        if np.linalg.norm(s) <= tol:
            x += alpha * phat
            r = s
            stats.iterations = it
            break
        shat = M(s)
        t = A @ shat
        tt = t @ t
        if tt == 0.0:
            raise BreakdownError(f"bicgstab breakdown (t = 0) at iteration {it}")
        omega = (t @ s) / tt
        x += alpha * phat + omega * shat
        r = s - omega * t
        rho_old = rho
        stats.iterations = it
        res = np.linalg.norm(r)
        stats.history.append(res / bnorm)
        if res <= tol:
            break
        if omega == 0.0:
            raise BreakdownError(f"bicgstab breakdown (omega = 0) at iteration {it}")
    true_res = np.linalg.norm(b - A @ x)
    stats.residual = true_res / bnorm
    stats.converged = bool(true_res <= tol * 1.0001)
    return x, stats


def gmres(A, b, M, rtol=1e-10, maxit=1000, restart=50, x0=None):
    """Right-preconditioned restarted GMRES with Givens rotations."""
    stats = KrylovStats("gmres")
    n = len(b)
    bnorm = np.linalg.norm(b)
    x = np.zeros_like(b) if x0 is None else x0.copy()
    if bnorm == 0:
        stats.residual, stats.converged = 0.0, True
        return np.zeros_like(b), stats
    tol = rtol * bnorm
    m = max(1, min(restart, n))
    total = 0
    while total < maxit:
        r = b - A @ x
        beta = np.linalg.norm(r)
        stats.history.append(beta / bnorm)
        if beta <= tol:
            break
        V = np.zeros((m + 1, n))
        H = np.zeros((m + 1, m))
        cs, sn = np.zeros(m), np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = r / beta
        Z = np.zeros((m, n))
        k_used = 0
        for k in range(m):
            Z[k] = M(V[k])
            w = A @ Z[k]
            for j in range(k + 1):
                H[j, k] = w @ V[j]
                w = w - H[j, k] * V[j]
            # second Gram-Schmidt pass for orthogonality
            for j in range(k + 1):
                c = w @ V[j]
                H[j, k] += c
                w = w - c * V[j]
            H[k + 1, k] = np.linalg.norm(w)
            for j in range(k):
                t = cs[j] * H[j, k] + sn[j] * H[j + 1, k]
                H[j + 1, k] = -sn[j] * H[j, k] + cs[j] * H[j + 1, k]
                H[j, k] = t
            den = math.hypot(H[k, k], H[k + 1, k])
            if den == 0.0:
                raise BreakdownError("gmres breakdown: zero column in Hessenberg matrix")
            cs[k], sn[k] = H[k, k] / den, H[k + 1, k] / den
            hk1 = H[k + 1, k]
            H[k, k] = den
            H[k + 1, k] = 0.0
            g[k + 1] = -sn[k] * g[k]
            g[k] = cs[k] * g[k]
            k_used = k + 1
            total += 1
            stats.history.append(abs(g[k + 1]) / bnorm)
            if abs(g[k + 1]) <= tol or total >= maxit or hk1 <= 1e-300:
                break
            V[k + 1] = w / hk1
        y = np.linalg.solve(np.triu(H[:k_used, :k_used]), g[:k_used])
        x = x + Z[:k_used].T @ y
        if abs(g[k_used]) <= tol:
            break
    stats.iterations = total
    true_res = np.linalg.norm(b - A @ x)
    stats.residual = true_res / bnorm
    stats.converged = bool(true_res <= tol * 1.0001)
    return x, stats


def solve_krylov(A, b, method="bicgstab", preconditioner="ilu0", rtol=1e-10, maxit=1000,
                 restart=50, x0=None):
    """Solve Ax = b; raises on breakdown or when the tolerance is not reached."""
    A = as_csr(A)
    b = np.asarray(b, dtype=np.float64)
    if A.shape[0] != A.shape[1] or A.shape[0] != len(b):
        raise ParameterError(f"shape mismatch: A {A.shape}, b {b.shape}")
    try:
        M = PRECONDITIONERS[preconditioner](A)
    except KeyError:
        raise ParameterError(f"unknown preconditioner '{preconditioner}'") from None
    if method == "bicgstab":
        x, stats = bicgstab(A, b, M, rtol, maxit, x0)
    elif method == "gmres":
        x, stats = gmres(A, b, M, rtol, maxit, restart, x0)
    else:
        raise ParameterError(f"unknown Krylov method '{method}'")
    if not stats.converged or not np.all(np.isfinite(x)):
        raise KrylovNonConvergence(
            f"{method}/{preconditioner} reached relative residual {stats.residual:.3e} "
            f"after {stats.iterations} iterations (rtol {rtol:.1e})", stats)
    return x, stats


# ------------------------------------------------------------ constraints

@dataclass
class ConstraintOperator:
    """Full vector = P @ free + g. ``free`` lists the retained dof ids in order."""

    P: sp.csr_matrix
    g: np.ndarray
    free: np.ndarray

    def recover(self, x_free):
        return self.P @ x_free + self.g

    def reduce_vector(self, r):
        return self.P.T @ r

    def reduce_matrix(self, A):
        PT = self.P.T.tocsr()
        return as_csr(PT @ A @ self.P)


def constraint_operator(n, constraints=None, dirichlet=None) -> ConstraintOperator:
    """Build the condensation map for hanging-node and Dirichlet constraints.

    ``constraints`` maps dof -> [(master dof, weight), ...]; masters may
    themselves be constrained (chains are expanded). ``dirichlet`` maps
    dof -> prescribed value.
    """
    constraints = constraints or {}
    dirichlet = dirichlet or {}
    fixed = set(constraints) | set(dirichlet)
    free = np.array([i for i in range(n) if i not in fixed], dtype=np.int64)
    col = np.full(n, -1, dtype=np.int64)
    col[free] = np.arange(len(free))

    resolved = {}
    visiting = set()

    def expand(i):
        # returns (dict free_col -> weight, constant)
        if i in resolved:
            return resolved[i]
        if i in dirichlet:
            out = ({}, float(dirichlet[i]))
        elif i in constraints:
            if i in visiting:
                raise ConstraintCycleError(f"cyclic constraint through dof {i}")
            visiting.add(i)
            acc, const = {}, 0.0
            for m, w in constraints[i]:
                sub, c = expand(m)
                const += w * c
                for k, v in sub.items():
                    acc[k] = acc.get(k, 0.0) + w * v
            visiting.discard(i)
            out = (acc, const)
        else:
            out = ({int(col[i]): 1.0}, 0.0)
        resolved[i] = out
        return out

    rows, cols, vals = [], [], []
    g = np.zeros(n)
    rows.extend(free.tolist())
    cols.extend(range(len(free)))
    vals.extend([1.0] * len(free))
    for i in sorted(fixed):
        sub, c = expand(i)
        g[i] = c
        for k, v in sorted(sub.items()):
            rows.append(i)
            cols.append(k)
            vals.append(v)
    P = csr_from_triplets(rows, cols, vals, (n, len(free)))
    return ConstraintOperator(P, g, free)


@dataclass
class ReducedSystem:
    A: sp.csr_matrix
    b: np.ndarray
    op: ConstraintOperator

    def recover(self, x):
        return self.op.recover(x)


def apply_constraints(A, b, constraints=None, dirichlet=None) -> ReducedSystem:
    """Condense Ax = b onto the free dofs: P^T A P y = P^T (b - A g)."""
    A = as_csr(A)
    op = constraint_operator(A.shape[0], constraints, dirichlet)
    rhs = op.reduce_vector(np.asarray(b, float) - A @ op.g)
    return ReducedSystem(op.reduce_matrix(A), rhs, op)
