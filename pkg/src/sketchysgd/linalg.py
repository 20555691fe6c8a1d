"""Dense linear-algebra kernels for skinny matrices and seeded sampling.

All matrices are float64 numpy arrays in row-major (C) order.  The kernels
target the p x r shapes (r << p) that arise when sketching a large symmetric
operator, plus small symmetric eigenproblems used by the diagnostics.  They
are thin, contract-checked wrappers over LAPACK via numpy: Householder QR,
Cholesky, thin SVD, and a symmetric eigensolver.

Randomness comes from a named, seeded generator: ``make_rng(seed)`` returns a
numpy ``Generator`` over the PCG64 bit generator, whose normal variates use
the ziggurat transform.  A fixed seed reproduces the sample stream bit for
bit across runs.  A generator instance is single-owner: one stream per
optimizer run, never shared across threads.
"""

from __future__ import annotations

import numpy as np

Rng = np.random.Generator

#: Largest symmetric eigenproblem the diagnostics-grade solver accepts.
EIGH_DIM_CAP = 4096


class DegenerateMatrixError(ValueError):
    """Raised when a sketch matrix is numerically rank deficient."""


class IndefiniteMatrixError(ValueError):
    """Raised when a Cholesky factorization hits a non-positive pivot."""


class DiagnosticCapError(ValueError):
    """Raised when a dense diagnostic exceeds its configured size cap."""


def make_rng(seed: int) -> Rng:
    """Create the package's seeded random generator (PCG64)."""
    return np.random.Generator(np.random.PCG64(seed))


def gaussian_matrix(rng: Rng, p: int, r: int) -> np.ndarray:
    """Draw a p x r matrix of i.i.d. standard normal entries.

    Deterministic given the generator state; advances the stream.
    """
    if p < 1 or r < 1:
        raise ValueError(f"matrix dimensions must be positive, got ({p}, {r})")
    return rng.standard_normal((p, r))


def qr_econ(mat: np.ndarray) -> np.ndarray:
    """Orthonormal basis of range(mat) for a full-column-rank p x r matrix.

    Returns Q (p x r) with ``Q.T @ Q = I`` to 1e-12 in max norm, computed by
    Householder reflections.  Raises ``DegenerateMatrixError`` when a column
    is numerically dependent on the preceding ones (vanishing R diagonal).
    """
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError("qr_econ expects a 2-d matrix")
    p, r = mat.shape
    if r > p:
        raise ValueError(f"qr_econ expects a tall matrix, got shape ({p}, {r})")
    q, rmat = np.linalg.qr(mat, mode="reduced")
    diag = np.abs(np.diag(rmat))
    tol = max(p, r) * np.finfo(np.float64).eps * (diag.max() if diag.size else 0.0)
    if diag.size == 0 or np.any(diag <= tol):
        raise DegenerateMatrixError("degenerate sketch matrix")
    return q


def cholesky(a: np.ndarray) -> np.ndarray:
    """Upper-triangular C with ``C.T @ C = a`` for a symmetric pd matrix.

    The input must be symmetric to 1e-10 relative tolerance.  A non-positive
    pivot raises ``IndefiniteMatrixError``; callers on the convex path treat
    that as fatal because their shifted sketches are positive definite.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("cholesky expects a square matrix")
    scale = np.abs(a).max() if a.size else 0.0
    if scale > 0 and np.abs(a - a.T).max() > 1e-10 * scale:
        raise ValueError("matrix is not symmetric within tolerance")
    try:
        lower = np.linalg.cholesky(0.5 * (a + a.T))
    except np.linalg.LinAlgError as exc:
        raise IndefiniteMatrixError("indefinite matrix") from exc
    return lower.T


def thin_svd(b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Left singular vectors and singular values of a p x r matrix.

    Returns ``(v, sigma)`` where ``b = v @ diag(sigma) @ w.T`` for some
    orthogonal w (discarded), with sigma sorted descending and the columns
    of v orthonormal.
    """
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 2:
        raise ValueError("thin_svd expects a 2-d matrix")
    if b.shape[1] > b.shape[0]:
        raise ValueError(f"thin_svd expects a tall matrix, got shape {b.shape}")
    v, sigma, _ = np.linalg.svd(b, full_matrices=False)
    return v, sigma


def eigh_small(a: np.ndarray, max_dim: int = EIGH_DIM_CAP) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a small symmetric matrix, eigenvalues ascending.

    Diagnostics-grade dense solver: refuses matrices larger than ``max_dim``
    so that verification paths cannot silently become production costs.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("eigh_small expects a square matrix")
    m = a.shape[0]
    if m > max_dim:
        raise DiagnosticCapError(
            f"diagnostic matrix too large: {m} exceeds the cap of {max_dim}"
        )
    scale = np.abs(a).max() if a.size else 0.0
    if scale > 0 and np.abs(a - a.T).max() > 1e-8 * scale:
        raise ValueError("matrix is not symmetric within tolerance")
    eigvals, eigvecs = np.linalg.eigh(0.5 * (a + a.T))
    return eigvals, eigvecs


def spectral_norm(b: np.ndarray) -> float:
    """Largest singular value of a tall matrix (exact, via thin SVD)."""
    _, sigma = thin_svd(b)
    return float(sigma[0]) if sigma.size else 0.0


def top_eig_diag_plus_rank1(diag: np.ndarray, scale, vec: np.ndarray):
    """Largest eigenvalue of ``diag(d) + scale * v v.T`` with scale >= 0.

    Solves the secular equation ``1 = scale * sum_j v_j^2 / (lam - d_j)`` by
    bisection on the bracket above the largest diagonal entry that carries a
    nonzero v component.  ``vec`` may be a single vector of length p or a
    stack of shape (m, p) with ``scale`` scalar or of shape (m,); the stacked
    form solves all m secular equations in lockstep.  Exact up to bisection
    tolerance; O(m p) per step.
    """
    diag = np.asarray(diag, dtype=np.float64)
    vec = np.asarray(vec, dtype=np.float64)
    if diag.ndim != 1:
        raise ValueError("diag must be a 1-d array")
    single = vec.ndim == 1
    vv = vec[None, :] if single else vec
    if vv.ndim != 2 or vv.shape[1] != diag.shape[0]:
        raise ValueError("vec rows must match the length of diag")
    scale_arr = np.broadcast_to(np.asarray(scale, dtype=np.float64), (vv.shape[0],))
    if np.any(scale_arr < 0):
        raise ValueError("scale must be nonnegative")
    d_max = float(diag.max())

    weights = scale_arr[:, None] * vv * vv  # (m, p)
    mass = weights.sum(axis=1)
    support = weights > 0
    # Largest diagonal entry with nonzero weight, per row; rows with no
    # support keep the unperturbed top eigenvalue d_max.
    d_sup = np.where(support, diag[None, :], -np.inf).max(axis=1)
    active = mass > 0

    lo = np.where(active, d_sup, d_max)
    hi = np.where(active, d_sup + mass, d_max)
    for _ in range(120):
        gap = hi - lo
        if np.all(gap <= 1e-15 * np.maximum(1.0, np.abs(hi))):
            break
        mid = 0.5 * (lo + hi)
        # f(mid) = sum_j w_j / (mid - d_j) over the supported entries.
        denom = mid[:, None] - diag[None, :]
        terms = np.where(support, weights / np.where(denom == 0, 1.0, denom), 0.0)
        val = terms.sum(axis=1)
        go_up = val > 1.0
        lo = np.where(active & go_up, mid, lo)
        hi = np.where(active & ~go_up, mid, hi)
    root = np.maximum(d_max, 0.5 * (lo + hi))
    return float(root[0]) if single else root
