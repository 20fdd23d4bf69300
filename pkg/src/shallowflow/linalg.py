"""CSR kernels, incomplete Cholesky and preconditioned conjugate gradients.

Matrices are ``scipy.sparse.csr_matrix`` with sorted, duplicate-free column
indices; the numerical kernels run on their raw arrays through numba. All
reductions are sequential, so results are bit-reproducible run to run.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numba
import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)


class Precond(str, enum.Enum):
    NONE = "NONE"
    DIAG = "DIAG"
    IC0 = "IC0"


class SolverError(RuntimeError):
    pass


class BreakdownError(SolverError):
    """p^T A p <= 0 in CG: the matrix is not positive definite."""


class IC0Breakdown(SolverError):
    """Non-positive pivot during incomplete Cholesky."""


@dataclass
class SolverReport:
    iterations: int
    final_residual: float
    converged: bool


def as_csr(A) -> sp.csr_matrix:
    A = sp.csr_matrix(A, dtype=float)
    A.sum_duplicates()
    A.sort_indices()
    return A


@numba.njit(cache=True)
def _spmv(indptr, indices, data, x, out):
    for i in range(len(indptr) - 1):
        acc = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            acc += data[k] * x[indices[k]]
        out[i] = acc


def spmv(A: sp.csr_matrix, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (A.shape[1],):
        raise ValueError(f"dimension mismatch: matrix {A.shape}, vector {x.shape}")
    out = np.empty(A.shape[0])
    _spmv(A.indptr, A.indices, A.data, x, out)
    return out


@numba.njit(cache=True)
def _ic0(indptr, indices, data, n):
    # L shares the lower-triangle pattern; the diagonal is the last entry of each row
    vals = data.copy()
    diag_pos = np.empty(n, dtype=np.int64)
    for i in range(n):
        diag_pos[i] = indptr[i + 1] - 1
        if indices[diag_pos[i]] != i:
            return vals, i
    for i in range(n):
        start, end = indptr[i], indptr[i + 1]
        for kk in range(start, end):
            k = indices[kk]
            # sparse dot of rows i and k over columns j < k
            s = vals[kk]
            pi = start
            pk = indptr[k]
            kend = diag_pos[k]
            while pi < kk and pk < kend:
                ci = indices[pi]
                ck = indices[pk]
                if ci == ck:
                    s -= vals[pi] * vals[pk]
                    pi += 1
                    pk += 1
                elif ci < ck:
                    pi += 1
                else:
                    pk += 1
            if k < i:
                vals[kk] = s / vals[diag_pos[k]]
            else:
                if s <= 0.0:
                    return vals, i
                vals[kk] = np.sqrt(s)
    return vals, -1


def ic0_factor(A: sp.csr_matrix) -> sp.csr_matrix:
    """Zero-fill incomplete Cholesky: L on the lower pattern of A, L L^T ~ A.

    Raises IC0Breakdown on a non-positive pivot so the caller can fall back
    to diagonal scaling.
    """
    A = as_csr(A)
    n = A.shape[0]
    lower = as_csr(sp.tril(A))
    vals, bad = _ic0(lower.indptr, lower.indices, lower.data, n)
    if bad >= 0:
        raise IC0Breakdown(f"non-positive pivot in row {bad}")
    L = sp.csr_matrix((vals, lower.indices.copy(), lower.indptr.copy()), shape=(n, n))
    return L


@numba.njit(cache=True)
def _ic0_solve(indptr, indices, data, r):
    n = len(r)
    y = r.copy()
    for i in range(n):
        s = y[i]
        end = indptr[i + 1] - 1
        for k in range(indptr[i], end):
            s -= data[k] * y[indices[k]]
        y[i] = s / data[end]
    # back substitution with L^T, column sweep over rows of L
    for i in range(n - 1, -1, -1):
        end = indptr[i + 1] - 1
        y[i] /= data[end]
        yi = y[i]
        for k in range(indptr[i], end):
            y[indices[k]] -= data[k] * yi
    return y


def apply_ic0(L: sp.csr_matrix, r: np.ndarray) -> np.ndarray:
    """Solve L L^T z = r."""
    diag = L.data[L.indptr[1:] - 1]
    if np.any(diag == 0.0):
        raise SolverError("zero diagonal in IC0 factor")
    return _ic0_solve(L.indptr, L.indices, L.data, np.asarray(r, dtype=float))


class Preconditioner:
    """Callable z = P^{-1} r for one of the supported kinds."""

    def __init__(self, A: sp.csr_matrix, kind: Precond | str = Precond.NONE):
        kind = Precond(kind)
        self.requested = kind
        self.kind = kind
        self.L = None
        self.inv_diag = None
        if kind is Precond.IC0:
            try:
                self.L = ic0_factor(A)
            except IC0Breakdown as exc:
                logger.warning("IC0 failed (%s); falling back to DIAG", exc)
                self.kind = Precond.DIAG
        if self.kind is Precond.DIAG:
            d = A.diagonal()
            if np.any(d <= 0):
                raise SolverError("DIAG preconditioner needs a positive diagonal")
            self.inv_diag = 1.0 / d

    def __call__(self, r: np.ndarray) -> np.ndarray:
        if self.kind is Precond.IC0:
            return _ic0_solve(self.L.indptr, self.L.indices, self.L.data, r)
        if self.kind is Precond.DIAG:
            return self.inv_diag * r
        return r.copy()


def pcg_solve(A: sp.csr_matrix, b: np.ndarray, precond=Precond.NONE, tol: float = 1e-8,
              max_iter: int | None = None, x0: np.ndarray | None = None,
              project=None) -> tuple[np.ndarray, SolverReport]:
    """Preconditioned conjugate gradients for SPD ``A``.

    Stops when ||b - A x|| <= tol ||b||. ``precond`` is a Precond kind or a
    prebuilt Preconditioner. ``project`` (optional) is applied to residuals,
    which keeps iterates in a subspace for consistent singular systems.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    A = A if sp.isspmatrix_csr(A) else as_csr(A)
    n = A.shape[0]
    b = np.asarray(b, dtype=float)
    if b.shape != (n,):
        raise ValueError(f"dimension mismatch: matrix {A.shape}, rhs {b.shape}")
    M = precond if isinstance(precond, Preconditioner) else Preconditioner(A, precond)
    max_iter = 10 * n if max_iter is None else max_iter
    indptr, indices, data = A.indptr, A.indices, A.data

    bnorm = np.linalg.norm(b)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    if bnorm == 0.0:
        return np.zeros(n), SolverReport(0, 0.0, True)
    Ap = np.empty(n)
    _spmv(indptr, indices, data, x, Ap)
    r = b - Ap
    if project is not None:
        r = project(r)
    rel = np.linalg.norm(r) / bnorm
    if rel <= tol:
        return x, SolverReport(0, rel, True)
    z = M(r)
    p = z.copy()
    rz = r @ z
    for it in range(1, max_iter + 1):
        _spmv(indptr, indices, data, p, Ap)
        pAp = p @ Ap
        if pAp <= 0.0:
            raise BreakdownError(f"p^T A p = {pAp:.3e} at iteration {it}; matrix is not SPD")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        if project is not None:
            r = project(r)
        rel = np.linalg.norm(r) / bnorm
        if rel <= tol:
            return x, SolverReport(it, rel, True)
        z = M(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, SolverReport(max_iter, rel, False)


def solve_pressure_system(aug: sp.csr_matrix, rhs: np.ndarray, tol: float = 1e-10,
                          max_iter: int | None = None,
                          precond=Precond.DIAG) -> tuple[np.ndarray, float, SolverReport]:
    """Solve [[A, m], [m^T, 0]] [q; mu] = [g; 0] with A's kernel the constants.

    The multiplier follows from 1^T A = 0: mu = 1^T g / 1^T m. The remaining
    singular but consistent system A q = g - mu m is solved by PCG with the
    residual projected onto range(A) = 1-perp; the constant is then fixed by
    m^T q = 0. The report carries the residual of the augmented system.
    """
    n = aug.shape[0] - 1
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape != (n + 1,):
        raise ValueError("rhs size does not match the augmented system")
    aug = aug.tocsr()
    A = as_csr(aug[:n, :n])
    m = np.asarray(aug[:n, n].todense()).ravel()
    g = rhs[:n]
    volume = m.sum()
    mu = g.sum() / volume
    if not np.isfinite(mu):
        raise SolverError("invalid zero-mean functional")
    g_c = g - mu * m

    def project(r):
        return r - r.mean()

    if isinstance(precond, Preconditioner):
        M = precond
    else:
        M = Preconditioner(A, precond)
    q, report = pcg_solve(A, g_c, M, tol=tol, max_iter=max_iter, project=project)
    q -= (m @ q) / volume
    res = np.concatenate([A @ q + mu * m - g, [m @ q - rhs[n]]])
    bn = np.linalg.norm(rhs)
    rel = float(np.linalg.norm(res) / bn) if bn > 0 else float(np.linalg.norm(res))
    report = SolverReport(report.iterations, rel, report.converged)
    if not report.converged:
        raise SolverError(f"pressure solve did not converge in {report.iterations} iterations "
                          f"(residual {rel:.3e})")
    return q, mu, report


def write_matrix_market(A, path) -> None:
    """Dump a matrix in MatrixMarket coordinate format for offline inspection."""
    from scipy.io import mmwrite

    mmwrite(str(path), sp.coo_matrix(A))
