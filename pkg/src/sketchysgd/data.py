"""Dataset ingestion, preprocessing, and random-feature transforms.

A :class:`Dataset` wraps an n x p sample matrix (dense row-major float64 or
scipy CSR) together with its label vector.  Text ingestion uses the libsvm
format: one sample per line, ``<label> <idx>:<val> ...`` with 1-based,
strictly increasing feature indices.  All transforms are pure: they return
new datasets and never mutate their input.
"""

from __future__ import annotations

import gzip
import io
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .linalg import DiagnosticCapError, EIGH_DIM_CAP, eigh_small


class LibsvmParseError(ValueError):
    """Malformed libsvm text; the message carries the 1-based line number."""


@dataclass(frozen=True)
class Dataset:
    """Row-major sample matrix with labels.

    ``features`` is either a dense float64 ndarray or a ``scipy.sparse``
    CSR matrix; ``labels`` holds regression targets or +/-1 class labels.
    ``provenance`` records where the data came from and the transform chain
    applied so far.
    """

    features: object
    labels: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        feats = self.features
        if sp.issparse(feats):
            feats = feats.tocsr()
            feats.sort_indices()
            if not np.all(np.isfinite(feats.data)):
                raise ValueError("dataset contains non-finite feature values")
        else:
            feats = np.ascontiguousarray(np.asarray(feats, dtype=np.float64))
            if feats.ndim != 2:
                raise ValueError("features must be a 2-d matrix")
            if not np.all(np.isfinite(feats)):
                raise ValueError("dataset contains non-finite feature values")
        labels = np.asarray(self.labels, dtype=np.float64).ravel()
        if labels.shape[0] != feats.shape[0]:
            raise ValueError(
                f"label count {labels.shape[0]} does not match sample count {feats.shape[0]}"
            )
        if not np.all(np.isfinite(labels)):
            raise ValueError("dataset contains non-finite labels")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.features)

    def dense_features(self) -> np.ndarray:
        if self.is_sparse:
            return self.features.toarray()
        return self.features

    def row_norms(self) -> np.ndarray:
        """Euclidean norm of every sample row."""
        if self.is_sparse:
            sq = np.asarray(self.features.multiply(self.features).sum(axis=1)).ravel()
        else:
            sq = np.einsum("ij,ij->i", self.features, self.features)
        return np.sqrt(sq)

    def take(self, indices: np.ndarray, note: str = "") -> "Dataset":
        """Row subset as a new dataset."""
        indices = np.asarray(indices, dtype=np.int64)
        prov = self.provenance + (f" | {note}" if note else "")
        return Dataset(self.features[indices], self.labels[indices], prov)


def _parse_line(line: str, lineno: int):
    parts = line.split()
    try:
        label = float(parts[0])
    except ValueError:
        raise LibsvmParseError(f"line {lineno}: malformed label token {parts[0]!r}") from None
    idxs = []
    vals = []
    prev = 0
    for token in parts[1:]:
        head, sep, tail = token.partition(":")
        if not sep:
            raise LibsvmParseError(f"line {lineno}: malformed token {token!r}")
        try:
            idx = int(head)
            val = float(tail)
        except ValueError:
            raise LibsvmParseError(f"line {lineno}: malformed token {token!r}") from None
        if idx == 0:
            raise LibsvmParseError(f"line {lineno}: feature indices are 1-based, got 0")
        if idx <= prev:
            raise LibsvmParseError(
                f"line {lineno}: feature index {idx} does not increase past {prev}"
            )
        prev = idx
        idxs.append(idx - 1)
        vals.append(val)
    return label, idxs, vals


def parse_libsvm(source, num_features: int | None = None) -> Dataset:
    """Parse libsvm text into a sparse dataset.

    ``source`` may be a string, a text stream, or an iterable of lines.  The
    feature count defaults to the largest index seen; pass ``num_features``
    to override (needed when trailing features are absent from the data).
    """
    if isinstance(source, str):
        lines = io.StringIO(source)
        name = "<string>"
    else:
        lines = source
        name = getattr(source, "name", "<stream>")

    labels = []
    indptr = [0]
    indices: list[int] = []
    data: list[float] = []
    max_idx = 0
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        label, idxs, vals = _parse_line(line, lineno)
        labels.append(label)
        indices.extend(idxs)
        data.extend(vals)
        indptr.append(len(indices))
        if idxs:
            max_idx = max(max_idx, idxs[-1] + 1)

    p = max_idx if num_features is None else int(num_features)
    if num_features is not None and max_idx > p:
        raise LibsvmParseError(
            f"feature index {max_idx} exceeds the declared feature count {p}"
        )
    mat = sp.csr_matrix(
        (np.asarray(data, dtype=np.float64), np.asarray(indices, dtype=np.int64), np.asarray(indptr, dtype=np.int64)),
        shape=(len(labels), p),
    )
    return Dataset(mat, np.asarray(labels, dtype=np.float64), provenance=str(name))


def load_libsvm(path, num_features: int | None = None) -> Dataset:
    """Read a libsvm file, transparently decompressing ``.gz`` paths."""
    path = str(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rt") as handle:
        ds = parse_libsvm(handle, num_features=num_features)
    return replace(ds, provenance=path)


def serialize_libsvm(ds: Dataset) -> str:
    """Write a dataset as libsvm text with shortest-round-trip floats."""
    mat = ds.features.tocsr() if ds.is_sparse else sp.csr_matrix(ds.features)
    out = []
    for i in range(ds.n):
        start, stop = mat.indptr[i], mat.indptr[i + 1]
        cols = mat.indices[start:stop]
        vals = mat.data[start:stop]
        fields = [repr(float(ds.labels[i]))]
        fields.extend(f"{c + 1}:{repr(float(v))}" for c, v in zip(cols, vals))
        out.append(" ".join(fields))
    return "\n".join(out) + ("\n" if out else "")


def save_libsvm(ds: Dataset, path) -> None:
    with open(path, "w") as handle:
        handle.write(serialize_libsvm(ds))


def normalize_rows(ds: Dataset) -> Dataset:
    """Scale every nonzero sample to unit Euclidean norm."""
    norms = ds.row_norms()
    inv = np.where(norms > 0, 1.0 / np.where(norms > 0, norms, 1.0), 1.0)
    if ds.is_sparse:
        feats = sp.diags(inv) @ ds.features
        feats = feats.tocsr()
    else:
        feats = ds.features * inv[:, None]
    return Dataset(feats, ds.labels, ds.provenance + " | normalize_rows")


@dataclass(frozen=True)
class StandardizeStats:
    """Per-feature centering and scaling learned on a training split."""

    mean: np.ndarray
    scale: np.ndarray  # 1.0 for zero-variance features (center only)


def standardization_stats(train: Dataset) -> StandardizeStats:
    """Population (1/n) mean and standard deviation of each feature."""
    dense = train.dense_features()
    mean = dense.mean(axis=0)
    var = dense.var(axis=0)  # population convention
    std = np.sqrt(var)
    scale = np.where(std > 0, std, 1.0)
    return StandardizeStats(mean=mean, scale=scale)


def standardize(ds: Dataset, stats: StandardizeStats) -> Dataset:
    """Center and scale features with training statistics; output is dense."""
    dense = ds.dense_features()
    out = (dense - stats.mean[None, :]) / stats.scale[None, :]
    return Dataset(out, ds.labels, ds.provenance + " | standardize")


@dataclass(frozen=True)
class FeatureMap:
    """Frozen random-features transform.

    ``rff-cosine`` maps x to sqrt(2/D) cos(W.T x + b) with W ~ N(0, 1/sigma^2)
    entries and b uniform on [0, 2pi); inner products approximate the
    Gaussian kernel exp(-||x - y||^2 / (2 sigma^2)).  ``relu`` maps x to
    max(0, W.T x) with W ~ N(0, 1/p) entries.
    """

    kind: str
    dim: int
    seed: int
    bandwidth: float = 1.0
    weights: np.ndarray = field(repr=False, default=None)
    offsets: np.ndarray = field(repr=False, default=None)

    @staticmethod
    def create(kind: str, dim: int, input_dim: int, seed: int, bandwidth: float = 1.0) -> "FeatureMap":
        if kind not in ("rff-cosine", "relu"):
            raise ValueError(f"unknown feature map kind {kind!r}")
        if dim < 1:
            raise ValueError("feature dimension must be positive")
        if bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        rng = np.random.Generator(np.random.PCG64(seed))
        if kind == "rff-cosine":
            weights = rng.standard_normal((input_dim, dim)) / bandwidth
            offsets = rng.uniform(0.0, 2.0 * np.pi, size=dim)
        else:
            weights = rng.standard_normal((input_dim, dim)) / math.sqrt(input_dim)
            offsets = None
        return FeatureMap(kind=kind, dim=dim, seed=seed, bandwidth=bandwidth,
                          weights=weights, offsets=offsets)


def random_features(ds: Dataset, fmap: FeatureMap) -> Dataset:
    """Apply a frozen feature map; the result is dense with ``fmap.dim`` columns."""
    if fmap.weights.shape[0] != ds.p:
        raise ValueError(
            f"feature map expects {fmap.weights.shape[0]} input features, dataset has {ds.p}"
        )
    proj = ds.features @ fmap.weights
    proj = np.asarray(proj)
    if fmap.kind == "rff-cosine":
        out = np.sqrt(2.0 / fmap.dim) * np.cos(proj + fmap.offsets[None, :])
    else:
        out = np.maximum(proj, 0.0)
    note = f" | random_features({fmap.kind}, D={fmap.dim}, seed={fmap.seed})"
    return Dataset(out, ds.labels, ds.provenance + note)


def split(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Disjoint random train/test partition, reproducible from the seed."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("split fraction must lie strictly between 0 and 1")
    if ds.n < 2:
        raise ValueError("need at least two samples to split")
    rng = np.random.Generator(np.random.PCG64(seed))
    perm = rng.permutation(ds.n)
    n_train = int(math.floor(fraction * ds.n))
    n_train = min(max(n_train, 1), ds.n - 1)
    train_idx = np.sort(perm[:n_train])
    test_idx = np.sort(perm[n_train:])
    return (
        ds.take(train_idx, note=f"split(train, {fraction}, seed={seed})"),
        ds.take(test_idx, note=f"split(test, {fraction}, seed={seed})"),
    )


def singular_values(ds: Dataset, max_dim: int = EIGH_DIM_CAP) -> np.ndarray:
    """All singular values of the sample matrix, descending.

    Computed from the eigendecomposition of the smaller Gram matrix
    (A.T A when p <= n, else A A.T); the smaller dimension must fit the
    dense diagnostic cap.
    """
    n, p = ds.n, ds.p
    if min(n, p) > max_dim:
        raise DiagnosticCapError(
            f"diagnostic matrix too large: min(n, p) = {min(n, p)} exceeds the cap of {max_dim}"
        )
    a = ds.features
    if p <= n:
        gram = (a.T @ a) if not sp.issparse(a) else (a.T @ a).toarray()
    else:
        gram = (a @ a.T) if not sp.issparse(a) else (a @ a.T).toarray()
    eigvals, _ = eigh_small(np.asarray(gram), max_dim=max_dim)
    eigvals = np.clip(eigvals, 0.0, None)
    return np.sqrt(eigvals[::-1])


def condition_lower_bound(ds: Dataset, l2: float, r: int = 100) -> float:
    """Lower bound on the problem condition number from the data spectrum.

    Returns ``(s1^2/n + l2) / (sr^2/n + l2)`` where ``s1`` and ``sr`` are the
    first and r-th singular values of the sample matrix.  When the matrix has
    fewer than r numerically positive singular values, the smallest positive
    one is used instead and the result is flagged (via a warning) as biased
    upward.
    """
    if r < 1:
        raise ValueError("r must be at least 1")
    if r > min(ds.n, ds.p):
        raise ValueError(f"r = {r} exceeds min(n, p) = {min(ds.n, ds.p)}")
    svals = singular_values(ds)
    s1 = svals[0]
    # Singular values come from a Gram eigendecomposition, so anything below
    # sqrt(eps)-level relative to s1 is numerically indistinguishable from 0.
    tol = np.sqrt(max(ds.n, ds.p) * np.finfo(np.float64).eps) * s1
    positive = svals[svals > tol]
    if positive.size >= r:
        sr = positive[r - 1]
    else:
        warnings.warn(
            f"rank {positive.size} < r = {r}; using the smallest positive singular "
            "value, so the bound is biased upward",
            RuntimeWarning,
            stacklevel=2,
        )
        sr = positive[-1] if positive.size else s1
    n = ds.n
    return float((s1 * s1 / n + l2) / (sr * sr / n + l2))
