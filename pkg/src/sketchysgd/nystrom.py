"""Randomized Nystrom approximation of a PSD operator and fast preconditioning.

Given black-box products with a symmetric PSD operator H (typically a
subsampled Hessian), ``rand_nys_approx`` builds a rank-r eigenpair
factorization ``H_hat = V diag(lam) V.T`` from a single blocked sketch
``Y = H Q``.  The regularized approximation ``P = H_hat + rho I`` then
supports O(p r) application of ``P^{-1}`` and ``P^{-1/2}`` through the
matrix inversion lemma, which is all the optimizer ever needs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import solve_triangular

from .linalg import (
    DegenerateMatrixError,
    IndefiniteMatrixError,
    Rng,
    cholesky,
    gaussian_matrix,
    qr_econ,
    spectral_norm,
    thin_svd,
)


class SketchNotPsdError(ValueError):
    """The shifted sketch failed its Cholesky factorization.

    For convex tasks the shifted sketch is positive definite, so this error
    indicates a broken HVP oracle rather than a recoverable condition.
    """


@dataclass(frozen=True)
class NystromApprox:
    """Rank-r eigenpair factorization of a sketched PSD operator.

    ``basis`` is p x r with orthonormal columns and ``eigenvalues`` holds the
    r nonnegative eigenvalue estimates in descending order.  ``anchor_w`` and
    ``batch`` record where the underlying Hessian was evaluated; both may be
    ``None`` for synthetic operators.  Instances are immutable and safe to
    apply concurrently.
    """

    basis: np.ndarray
    eigenvalues: np.ndarray
    anchor_w: np.ndarray | None = None
    batch: np.ndarray | None = None
    shift: float = 0.0

    def __post_init__(self):
        basis = np.asarray(self.basis, dtype=np.float64)
        eig = np.asarray(self.eigenvalues, dtype=np.float64).ravel()
        if basis.ndim != 2 or basis.shape[1] != eig.shape[0]:
            raise ValueError("basis columns must match the number of eigenvalues")
        if np.any(eig < 0):
            raise ValueError("eigenvalue estimates must be nonnegative")
        if np.any(np.diff(eig) > 0):
            raise ValueError("eigenvalues must be sorted descending")
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "eigenvalues", eig)

    @property
    def p(self) -> int:
        return self.basis.shape[0]

    @property
    def rank(self) -> int:
        return self.eigenvalues.shape[0]

    @staticmethod
    def rank_zero(p: int) -> "NystromApprox":
        """Empty approximation; the preconditioner degenerates to rho*I."""
        return NystromApprox(np.zeros((p, 0)), np.zeros(0))

    def matrix(self) -> np.ndarray:
        """Dense ``V diag(lam) V.T`` (diagnostics only)."""
        return (self.basis * self.eigenvalues) @ self.basis.T

    def apply(self, v: np.ndarray) -> np.ndarray:
        """Product of the approximation with a vector or block."""
        coeffs = self.basis.T @ np.asarray(v, dtype=np.float64)
        weights = self.eigenvalues[:, None] if coeffs.ndim == 2 else self.eigenvalues
        return self.basis @ (weights * coeffs)


def rand_nys_approx(
    hvp: Callable[[np.ndarray], np.ndarray],
    p: int,
    rank: int,
    rng: Rng,
    anchor_w: np.ndarray | None = None,
    batch: np.ndarray | None = None,
) -> NystromApprox:
    """Build a rank-r Nystrom approximation from blocked operator products.

    ``hvp`` must map a p x r block to the operator applied column-wise; it is
    called once (a single data pass for subsampled GLM Hessians).  The sketch
    is stabilized by a shift ``nu = sqrt(p) * ulp(||Y||_2)`` that is removed
    from the recovered eigenvalues, clamping at zero, so the result is PSD
    and never overestimates the operator.
    """
    if not 1 <= rank <= p:
        raise ValueError(f"rank {rank} must lie in [1, {p}]")
    try:
        test_matrix = qr_econ(gaussian_matrix(rng, p, rank))
    except DegenerateMatrixError:
        # A degenerate Gaussian draw has probability zero; retry once in case
        # of a pathological stream before giving up.
        test_matrix = qr_econ(gaussian_matrix(rng, p, rank))
    sketch = np.asarray(hvp(test_matrix), dtype=np.float64)
    if sketch.shape != (p, rank):
        raise ValueError(f"hvp returned shape {sketch.shape}, expected ({p}, {rank})")

    nu = np.sqrt(p) * np.spacing(spectral_norm(sketch))
    shifted = sketch + nu * test_matrix
    core = test_matrix.T @ shifted
    try:
        chol = cholesky(0.5 * (core + core.T))
    except IndefiniteMatrixError as exc:
        raise SketchNotPsdError("sketch not PSD") from exc
    # B = Y C^{-1} via one triangular solve: C.T B.T = Y.T
    b = solve_triangular(chol, sketch.T, trans="T", lower=False).T
    basis, sigma = thin_svd(b)
    eigenvalues = np.maximum(sigma * sigma - nu, 0.0)
    return NystromApprox(basis, eigenvalues, anchor_w=anchor_w, batch=batch, shift=float(nu))


def _check_rho(rho: float) -> float:
    if not rho > 0:
        raise ValueError(f"rho must be positive, got {rho}")
    return float(rho)


def precond_solve(nys: NystromApprox, rho: float, v: np.ndarray) -> np.ndarray:
    """Apply ``(H_hat + rho I)^{-1}`` in O(p r).

    Matrix-inversion-lemma form: ``V (lam + rho)^{-1} V.T v + (v - V V.T v)/rho``.
    """
    rho = _check_rho(rho)
    v = np.asarray(v, dtype=np.float64)
    coeffs = nys.basis.T @ v
    denom = nys.eigenvalues + rho
    scaled = coeffs / (denom[:, None] if coeffs.ndim == 2 else denom)
    return nys.basis @ scaled + (v - nys.basis @ coeffs) / rho


def precond_inv_sqrt(nys: NystromApprox, rho: float, v: np.ndarray) -> np.ndarray:
    """Apply ``(H_hat + rho I)^{-1/2}`` in O(p r)."""
    rho = _check_rho(rho)
    v = np.asarray(v, dtype=np.float64)
    coeffs = nys.basis.T @ v
    denom = np.sqrt(nys.eigenvalues + rho)
    scaled = coeffs / (denom[:, None] if coeffs.ndim == 2 else denom)
    return nys.basis @ scaled + (v - nys.basis @ coeffs) / np.sqrt(rho)
