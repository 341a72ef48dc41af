"""Small dense symmetric eigensolver used for every PSD decision in the package.

Everything downstream (slack certification, feasibility reports, rank checks)
funnels through `eig_sym` / `is_psd` so that PSD-ness is always decided by the
same, independently testable routine rather than by whatever the SDP solver
happened to believe internally.

Matrices here are tiny (Gram-lift blocks, at most a few dozen rows), so a
cyclic Jacobi iteration is accurate, simple, and fast enough.
"""

from __future__ import annotations

import numpy as np

MAX_DIM = 64
MAX_SWEEPS = 100


class EigenFailure(RuntimeError):
    """Raised when the Jacobi sweep cap is hit before convergence."""


class SymMatrix:
    """Symmetric matrix in packed lower-triangular storage.

    Only the lower triangle is stored (row-major: (i, j) with i >= j sits at
    i*(i+1)//2 + j), so symmetry is structural rather than a runtime promise.
    """

    __slots__ = ("dim", "packed")

    def __init__(self, dim, packed=None):
        if dim < 0:
            raise ValueError("dim must be nonnegative")
        self.dim = int(dim)
        count = self.dim * (self.dim + 1) // 2
        if packed is None:
            self.packed = np.zeros(count)
        else:
            packed = np.asarray(packed, dtype=float).ravel()
            if packed.size != count:
                raise ValueError(f"packed storage must have {count} entries, got {packed.size}")
            self.packed = packed.copy()

    @classmethod
    def from_dense(cls, a, sym_tol=1e-12):
        a = np.asarray(a, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("expected a square matrix")
        scale = 1.0 + np.abs(a).max(initial=0.0)
        if np.abs(a - a.T).max(initial=0.0) > sym_tol * scale:
            raise ValueError("matrix is not symmetric")
        n = a.shape[0]
        out = cls(n)
        k = 0
        for i in range(n):
            out.packed[k:k + i + 1] = a[i, :i + 1]
            k += i + 1
        return out

    def to_dense(self):
        n = self.dim
        a = np.zeros((n, n))
        k = 0
        for i in range(n):
            a[i, :i + 1] = self.packed[k:k + i + 1]
            k += i + 1
        return a + np.tril(a, -1).T

    def _index(self, i, j):
        if not (0 <= i < self.dim and 0 <= j < self.dim):
            raise IndexError("index out of range")
        if i < j:
            i, j = j, i
        return i * (i + 1) // 2 + j

    def __getitem__(self, ij):
        return self.packed[self._index(*ij)]

    def __setitem__(self, ij, value):
        self.packed[self._index(*ij)] = float(value)

    def __repr__(self):
        return f"SymMatrix(dim={self.dim})"


def _as_dense_sym(a):
    if isinstance(a, SymMatrix):
        return a.to_dense()
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("expected a square matrix or SymMatrix")
    return 0.5 * (a + a.T)


def _offdiag_norm(A):
    # Summing the off entries directly avoids the cancellation floor of
    # frobenius^2 - diag^2, which bottoms out near sqrt(eps)*||A||_F.
    u = np.triu(A, 1)
    return float(np.sqrt(2.0 * (u * u).sum()))


def eig_sym(a, max_sweeps=MAX_SWEEPS):
    """Full symmetric eigendecomposition by cyclic Jacobi rotations.

    Args:
        a: SymMatrix or array-like square symmetric matrix, dim <= 64.
        max_sweeps: sweep cap; exceeding it raises EigenFailure.

    Returns:
        (w, V): eigenvalues ascending, orthonormal eigenvectors as columns,
        with A @ V == V @ diag(w) up to roundoff.
    """
    A = _as_dense_sym(a).copy()
    n = A.shape[0]
    if n > MAX_DIM:
        raise ValueError(f"dimension {n} exceeds the supported maximum {MAX_DIM}")
    V = np.eye(n)
    if n <= 1:
        return np.diag(A).copy(), V

    scale = 1.0 + np.abs(np.diag(A)).sum() + np.abs(A).max()
    # Off-diagonal mass small relative to the matrix scale counts as converged.
    stop = 1e-14 * scale
    converged = False
    for _ in range(max_sweeps):
        off = _offdiag_norm(A)
        if off <= stop:
            converged = True
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-18 * scale:
                    continue
                # Classic stable rotation angle choice.
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = np.sign(theta) if theta != 0 else 1.0
                t = t / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                app, aqq = A[p, p], A[q, q]
                rp = A[:, p].copy()
                rq = A[:, q].copy()
                A[:, p] = c * rp - s * rq
                A[:, q] = s * rp + c * rq
                A[p, :] = A[:, p]
                A[q, :] = A[:, q]
                A[p, p] = app - t * apq
                A[q, q] = aqq + t * apq
                A[p, q] = 0.0
                A[q, p] = 0.0
                vp = V[:, p].copy()
                V[:, p] = c * vp - s * V[:, q]
                V[:, q] = s * vp + c * V[:, q]
    else:
        converged = False
    if not converged:
        off = _offdiag_norm(A)
        if off > stop:
            raise EigenFailure(f"Jacobi did not converge in {max_sweeps} sweeps (off={off:.3e})")

    w = np.diag(A).copy()
    order = np.argsort(w, kind="stable")
    return w[order], V[:, order]


def psd_scale(a):
    """Relative scale 1 + trace(|A|) used by the PSD tolerance."""
    A = _as_dense_sym(a)
    return 1.0 + float(np.abs(np.diag(A)).sum())


def is_psd(a, tol=1e-9):
    """True when lambda_min(A) >= -tol * (1 + trace(|A|))."""
    A = _as_dense_sym(a)
    if A.shape[0] == 0:
        return True
    w, _ = eig_sym(A)
    return bool(w[0] >= -tol * psd_scale(A))


def min_eig(a):
    A = _as_dense_sym(a)
    if A.shape[0] == 0:
        return 0.0
    w, _ = eig_sym(A)
    return float(w[0])
