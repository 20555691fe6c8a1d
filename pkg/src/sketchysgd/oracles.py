"""Finite-sum problem oracles for ridge and l2-regularized logistic regression.

The objective is ``f(w) = (1/n) sum_i f_i(w) + (l2/2) ||w||^2`` with

* ridge:    ``f_i(w) = 0.5 (a_i' w - b_i)^2``
* logistic: ``f_i(w) = log(1 + exp(-y_i a_i' w))``, labels in {-1, +1}.

The oracle exposes minibatch gradients and minibatch Hessian-vector
products over dense or CSR data.  The l2 term enters the loss and gradient
but is deliberately excluded from Hessian-vector products: the curvature
sketch only ever sees the data part ``(1/|S|) sum_{i in S} d_i a_i a_i'``,
and the preconditioner regularization absorbs the rest.

Oracles are immutable after construction and safe for concurrent reads.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .data import Dataset
from .linalg import Rng

TASKS = ("ridge", "logistic")


def sample_batch(rng: Rng, n: int, b: int) -> np.ndarray:
    """Uniform random b-subset of {0..n-1}, without replacement, sorted."""
    if not 1 <= b <= n:
        raise ValueError(f"batch size {b} must lie in [1, {n}]")
    if b == n:
        return np.arange(n, dtype=np.int64)
    idx = rng.choice(n, size=b, replace=False)
    return np.sort(idx.astype(np.int64))


@dataclass(frozen=True)
class ProblemOracle:
    """Loss/gradient/HVP interface for one GLM task over a dataset."""

    data: Dataset
    task: str
    l2: float = 0.0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.l2 < 0:
            raise ValueError("l2 regularization must be nonnegative")
        if self.task == "logistic" and not np.all(np.abs(self.data.labels) == 1.0):
            raise ValueError("logistic labels must be -1 or +1")

    @property
    def n(self) -> int:
        return self.data.n

    @property
    def p(self) -> int:
        return self.data.p

    def _check_w(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (self.p,):
            raise ValueError(f"iterate has shape {w.shape}, expected ({self.p},)")
        return w

    def _margins(self, w, rows=None) -> np.ndarray:
        feats = self.data.features if rows is None else self.data.features[rows]
        return np.asarray(feats @ w).ravel()

    def full_loss(self, w: np.ndarray) -> float:
        """Objective value, including the l2 term."""
        w = self._check_w(w)
        z = self._margins(w)
        if self.task == "ridge":
            resid = z - self.data.labels
            base = 0.5 * float(resid @ resid) / self.n
        else:
            # log(1 + exp(-y z)) evaluated stably
            base = float(np.logaddexp(0.0, -self.data.labels * z).sum()) / self.n
        return base + 0.5 * self.l2 * float(w @ w)

    def mean_sample_loss(self, w: np.ndarray) -> float:
        """Unregularized mean per-sample loss (the test-split metric)."""
        w = self._check_w(w)
        z = self._margins(w)
        if self.task == "ridge":
            resid = z - self.data.labels
            return 0.5 * float(resid @ resid) / self.n
        return float(np.logaddexp(0.0, -self.data.labels * z).sum()) / self.n

    def accuracy(self, w: np.ndarray) -> float:
        """Classification accuracy with ties (zero margin) counted as +1."""
        if self.task != "logistic":
            raise ValueError("accuracy is only defined for the logistic task")
        w = self._check_w(w)
        pred = np.where(self._margins(w) >= 0.0, 1.0, -1.0)
        return float(np.mean(pred == self.data.labels))

    def minibatch_loss(self, w: np.ndarray, batch: np.ndarray) -> float:
        """Mean loss over a batch plus the l2 term (finite-difference target)."""
        w = self._check_w(w)
        batch = self._check_batch(batch)
        z = self._margins(w, batch)
        if self.task == "ridge":
            resid = z - self.data.labels[batch]
            base = 0.5 * float(resid @ resid) / batch.size
        else:
            base = float(np.logaddexp(0.0, -self.data.labels[batch] * z).sum()) / batch.size
        return base + 0.5 * self.l2 * float(w @ w)

    def _check_batch(self, batch) -> np.ndarray:
        batch = np.asarray(batch, dtype=np.int64).ravel()
        if batch.size == 0:
            raise ValueError("batch must be nonempty")
        if batch.min() < 0 or batch.max() >= self.n:
            raise ValueError("batch indices out of range")
        return batch

    def minibatch_gradient(self, w: np.ndarray, batch: np.ndarray) -> np.ndarray:
        """``(1/|B|) sum_{i in B} grad f_i(w) + l2 * w``."""
        w = self._check_w(w)
        batch = self._check_batch(batch)
        feats = self.data.features[batch]
        z = np.asarray(feats @ w).ravel()
        if self.task == "ridge":
            coeff = z - self.data.labels[batch]
        else:
            y = self.data.labels[batch]
            # d/dz log(1 + exp(-y z)) = -y sigma(-y z)
            coeff = -y * expit(-y * z)
        grad = np.asarray(feats.T @ coeff).ravel() / batch.size
        return grad + self.l2 * w

    def curvature_weights(self, w: np.ndarray, batch: np.ndarray) -> np.ndarray:
        """Per-sample Hessian weights d_i(w): 1 for ridge, sigma(1-sigma) for logistic."""
        w = self._check_w(w)
        batch = self._check_batch(batch)
        if self.task == "ridge":
            return np.ones(batch.size)
        y = self.data.labels[batch]
        s = expit(y * self._margins(w, batch))
        return s * (1.0 - s)

    def minibatch_hvp(self, w: np.ndarray, batch: np.ndarray, v: np.ndarray) -> np.ndarray:
        """``(1/|S|) sum_{i in S} d_i(w) a_i (a_i' v)``, l2 term excluded.

        ``v`` may be a vector of length p or a block of shape (p, r); blocks
        are pushed through the data in one pass.
        """
        w = self._check_w(w)
        batch = self._check_batch(batch)
        v = np.asarray(v, dtype=np.float64)
        if v.shape[0] != self.p:
            raise ValueError(f"vector has leading dimension {v.shape[0]}, expected {self.p}")
        feats = self.data.features[batch]
        av = np.asarray(feats @ v)
        d = self.curvature_weights(w, batch)
        weighted = av * (d[:, None] if av.ndim == 2 else d)
        return np.asarray(feats.T @ weighted) / batch.size

    def hessian_matrix(self, w: np.ndarray, batch: np.ndarray | None = None) -> np.ndarray:
        """Dense ``(1/|S|) A_S' D A_S`` (l2 excluded) for diagnostics and tests."""
        w = self._check_w(w)
        batch = np.arange(self.n, dtype=np.int64) if batch is None else self._check_batch(batch)
        feats = self.data.features[batch]
        d = self.curvature_weights(w, batch)
        if sp.issparse(feats):
            h = (feats.multiply(d[:, None])).T @ feats
            h = np.asarray(h.todense())
        else:
            h = (feats * d[:, None]).T @ feats
        return h / batch.size

    @cached_property
    def smoothness_upper_bound(self) -> float:
        """Upper bound on the objective's smoothness constant.

        ``(1/n) sum ||a_i||^2`` for ridge, a quarter of that for logistic,
        plus the l2 coefficient.  Drives the default preconditioner
        regularization and the SGD/SVRG default learning rates.
        """
        norms_sq = float(np.sum(self.data.row_norms() ** 2))
        base = norms_sq / self.n
        if self.task == "logistic":
            base *= 0.25
        return base + self.l2

    def sgd_default_learning_rate(self) -> float:
        """``max(1/(3L), 1/(2(L + n*l2)))`` with L the smoothness bound."""
        lhat = self.smoothness_upper_bound
        return max(1.0 / (3.0 * lhat), 1.0 / (2.0 * (lhat + self.n * self.l2)))
