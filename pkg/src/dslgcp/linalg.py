"""Sparse Cholesky factorization built on SuperLU.

SuperLU run in symmetric mode with diagonal pivoting disabled computes
``P A P^T = L U`` with ``U = D L^T`` for a symmetric positive definite ``A``.
Scaling the unit lower factor by ``sqrt(D)`` gives the Cholesky factor of
the permuted matrix, which is all the GMRF machinery needs: log
determinants, solves, and draws with covariance ``A^{-1}``.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spl


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a precision matrix cannot be Cholesky factorized."""


class SparseCholesky:
    """Cholesky factor of a sparse symmetric positive definite matrix.

    Parameters
    ----------
    A : sparse matrix
        Symmetric positive definite matrix. Only the full (both triangles)
        storage is accepted.
    """

    def __init__(self, A):
        A = sp.csc_matrix(A, dtype=float)
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError(f"matrix must be square, got {A.shape}")
        self.n = n
        if n == 0:
            self._perm = np.zeros(0, dtype=int)
            self._d = np.zeros(0)
            self._U = sp.csr_matrix((0, 0))
            return
        try:
            lu = spl.splu(
                A,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options=dict(SymmetricMode=True),
            )
        except RuntimeError as exc:  # exactly singular
            raise NotPositiveDefiniteError(f"factorization failed: {exc}") from exc
        if not np.array_equal(lu.perm_r, lu.perm_c):
            raise NotPositiveDefiniteError("symmetric factorization required pivoting")
        d = lu.U.diagonal()
        if not np.all(np.isfinite(d)) or np.any(d <= 0.0):
            raise NotPositiveDefiniteError(
                f"non-positive pivot (min {np.min(d):.3e}); matrix is not positive definite"
            )
        # A[q][:, q] = Lc Lc^T  with  Lc = L sqrt(D)
        self._perm = np.argsort(lu.perm_c)
        self._d = d
        self._U = sp.csr_matrix(lu.U)
        self._lu = lu

    def logdet(self) -> float:
        """Log determinant of ``A``."""
        return float(np.sum(np.log(self._d)))

    def solve(self, b):
        """Solve ``A x = b``."""
        b = np.asarray(b, dtype=float)
        if self.n == 0:
            return b.copy()
        return self._lu.solve(b)

    def solve_Lt(self, z):
        """Return ``x`` such that ``Cov(x) = A^{-1}`` when ``z`` is standard normal.

        Accepts a vector or an ``(n, k)`` array of independent columns.
        """
        z = np.asarray(z, dtype=float)
        if self.n == 0:
            return z.copy()
        scale = np.sqrt(self._d)
        rhs = z * (scale if z.ndim == 1 else scale[:, None])
        y = spl.spsolve_triangular(self._U, rhs, lower=False)
        x = np.empty_like(y)
        x[self._perm] = y
        return x

    def inv_diag(self, chunk: int = 256) -> np.ndarray:
        """Diagonal of ``A^{-1}`` from column-block solves (O(n nnz(L)) work)."""
        out = np.empty(self.n)
        for start in range(0, self.n, chunk):
            idx = np.arange(start, min(start + chunk, self.n))
            E = np.zeros((self.n, len(idx)))
            E[idx, np.arange(len(idx))] = 1.0
            X = self._lu.solve(E)
            out[idx] = X[idx, np.arange(len(idx))]
        return out

    def inverse(self) -> np.ndarray:
        """Dense ``A^{-1}``; intended for tests and small problems."""
        return self.solve(np.eye(self.n))


def cholesky(A) -> SparseCholesky:
    return SparseCholesky(A)
