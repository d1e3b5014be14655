"""Small dense linear-algebra helpers used across the library.

Everything here operates on plain float64 numpy arrays. Activation
matrices are column-batched: shape (units, samples).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "NumericError",
    "orthonormal_columns",
    "jacobi_eigh",
    "singular_values",
    "percentile",
]



class NumericError(RuntimeError):
    """Raised when a computation encounters non-finite values."""


def orthonormal_columns(dim: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Draw a (dim, k) matrix with orthonormal columns.

    The columns are the first k columns of the Q factor of a QR
    decomposition of an i.i.d. standard-normal (dim, dim) matrix, with
    signs fixed so the factorization is unique.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > dim:
        raise ValueError(f"k={k} exceeds dim={dim}")
    a = rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(a)
    # sign-fix: make diag(R) positive so Q is a deterministic function of A
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q[:, :k] * signs[:k]


def jacobi_eigh(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a symmetric matrix via cyclic Jacobi rotations.

    Sweeps 2x2 rotations until the off-diagonal Frobenius norm falls
    below tol (relative to the matrix norm). Returns eigenvalues in
    ascending order.
    """
    a = np.array(a, dtype=np.float64, copy=True)
    n = a.shape[0]
    if a.ndim != 2 or a.shape != (n, n):
        raise ValueError(f"expected square matrix, got {a.shape}")
    if n == 1:
        return a[0, :1].copy()
    scale = max(np.linalg.norm(a), 1.0)
    # rotations smaller than this cannot push the off-diagonal norm
    # back above the convergence threshold
    skip = tol * scale / n
    for _ in range(max_sweeps):
        off = np.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= skip:
                    continue
                theta = 0.5 * np.arctan2(2.0 * apq, a[q, q] - a[p, p])
                c = np.cos(theta)
                s = np.sin(theta)
                rp = c * a[p, :] - s * a[q, :]
                rq = s * a[p, :] + c * a[q, :]
                a[p, :] = rp
                a[q, :] = rq
                cp = c * a[:, p] - s * a[:, q]
                cq = s * a[:, p] + c * a[:, q]
                a[:, p] = cp
                a[:, q] = cq
    return np.sort(np.diag(a))


def singular_values(h: np.ndarray, *, use_jacobi: bool = False) -> np.ndarray:
    """Singular values of (1/sqrt(n)) * h, sorted descending.

    h is an (m, n) activation matrix. The values are computed as square
    roots of the eigenvalues of the smaller Gram matrix of h / sqrt(n);
    roundoff-negative eigenvalues clamp to zero. All m values are
    returned (zeros beyond the rank). use_jacobi switches the symmetric
    eigensolver from LAPACK to the reference Jacobi implementation (the
    two agree to 1e-9; LAPACK is orders of magnitude faster at the
    widths the over-growth ablations reach).
    """
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2:
        raise ValueError(f"expected 2-d activation matrix, got shape {h.shape}")
    m, n = h.shape
    if m < 1 or n < 1:
        raise ValueError(f"empty activation matrix {h.shape}")
    if not np.all(np.isfinite(h)):
        raise NumericError("non-finite entries in activation matrix")
    if m <= n:
        gram = (h @ h.T) / n
    else:
        gram = (h.T @ h) / n
    dim = gram.shape[0]
    eigvals = jacobi_eigh(gram) if use_jacobi else np.linalg.eigvalsh(gram)
    eigvals = np.clip(eigvals, 0.0, None)
    svals = np.sqrt(eigvals)[::-1]
    if dim < m:
        svals = np.concatenate([svals, np.zeros(m - dim)])
    return svals


def percentile(values, p: float) -> float:
    """Nearest-rank percentile: the element at index ceil(p/100 * N) - 1
    of the ascending sort (index 0 when p = 0). Always a member of values.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("percentile of empty input")
    if not 0.0 <= p <= 100.0:
        raise ValueError(f"p must be in [0, 100], got {p}")
    ordered = np.sort(values)
    idx = max(int(np.ceil(p / 100.0 * values.size)) - 1, 0)
    return float(ordered[idx])
