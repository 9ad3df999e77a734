"""Relevance scores, the relevance/redundancy trade-off, and feature Gram matrices."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .dataset import NormState, SparseDataset
from .errors import CapacityError, DomainError, ShapeError, StateError

GRAM_LIMIT_ENV = "MMFS_GRAM_LIMIT"
DEFAULT_GRAM_LIMIT = 4096


def gram_limit() -> int:
    value = os.environ.get(GRAM_LIMIT_ENV)
    return int(value) if value else DEFAULT_GRAM_LIMIT


@dataclass(frozen=True, eq=False)
class RelevanceVector:
    """Per-feature relevance. ``excluded`` marks features barred from selection."""

    values: np.ndarray
    excluded: np.ndarray
    theta_applied: float | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        excluded = np.asarray(self.excluded, dtype=bool)
        if excluded.shape != values.shape:
            raise ShapeError("excluded mask must match the relevance vector")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "excluded", excluded)

    @classmethod
    def of(cls, values) -> "RelevanceVector":
        values = np.asarray(values, dtype=np.float64)
        return cls(values, np.zeros(values.shape, dtype=bool))

    def __len__(self):
        return self.values.size


def as_relevance(r) -> RelevanceVector:
    return r if isinstance(r, RelevanceVector) else RelevanceVector.of(r)


def correlation_relevance(dataset: SparseDataset) -> RelevanceVector:
    """r_i = |f_i . y| on normalized data (Pearson correlation when centered)."""
    if dataset.norm_state is NormState.RAW:
        raise StateError("relevance needs normalized features and labels")
    r = np.zeros(dataset.n_features)
    r[dataset.feature_ids] = np.abs(dataset.to_csc().T @ dataset.labels)
    excluded = ~dataset.selectable_mask()
    r[excluded] = 0.0
    return RelevanceVector(r, excluded)


def scale_relevance(r, theta: float) -> RelevanceVector:
    """Multiply relevance by theta / (1 - theta)."""
    if not 0.0 < theta < 1.0:
        raise DomainError(f"theta must lie in (0, 1), got {theta}")
    r = as_relevance(r)
    return RelevanceVector(r.values * (theta / (1.0 - theta)), r.excluded, theta)


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "linear"
    sigma: float | None = None

    def __post_init__(self):
        if self.kind not in ("linear", "poly2", "gaussian"):
            raise DomainError(f"unknown kernel {self.kind!r}")
        if self.kind == "gaussian" and self.sigma is not None and not self.sigma > 0:
            raise DomainError("gaussian kernel needs sigma > 0")


def kernel_eval(spec: KernelSpec, f_i, f_j) -> float:
    f_i = np.asarray(f_i, dtype=np.float64)
    f_j = np.asarray(f_j, dtype=np.float64)
    dot = float(f_i @ f_j)
    if spec.kind == "linear":
        return dot
    if spec.kind == "poly2":
        return dot * dot
    if spec.sigma is None:
        raise DomainError("gaussian kernel_eval needs an explicit sigma")
    d2 = max(float(f_i @ f_i) + float(f_j @ f_j) - 2.0 * dot, 0.0)
    return math.exp(-d2 / (2.0 * spec.sigma ** 2))


@dataclass(frozen=True, eq=False)
class GramMatrix:
    values: np.ndarray
    kind: str
    sigma: float | None = None

    @property
    def order(self) -> int:
        return self.values.shape[0]


def _check_gram_size(n: int, limit: int | None):
    limit = gram_limit() if limit is None else limit
    if n > limit:
        raise CapacityError(
            f"a dense {n}x{n} Gram matrix exceeds the limit of {limit} features; "
            "use the dcd solver, which never forms it")


def median_sigma(G_lin: np.ndarray, seed: int = 0, n_pairs: int = 500) -> float:
    """Median pairwise feature distance over at most ``n_pairs`` random pairs."""
    n = G_lin.shape[0]
    if n < 2:
        return 1.0
    rng = np.random.default_rng(seed)
    i = rng.integers(0, n, size=n_pairs)
    j = rng.integers(0, n, size=n_pairs)
    keep = i != j
    diag = np.diag(G_lin)
    d2 = np.maximum(diag[i[keep]] + diag[j[keep]] - 2 * G_lin[i[keep], j[keep]], 0.0)
    med = float(np.sqrt(np.median(d2))) if d2.size else 0.0
    return med if med > 0 else 1.0


def gram_matrix(dataset: SparseDataset, spec: KernelSpec = KernelSpec(),
                feature_ids=None, limit: int | None = None, seed: int = 0) -> GramMatrix:
    """Dense kernel matrix over all features (or the given subset).

    Gaussian entries use ||f_i - f_j||^2 = Q_ii + Q_jj - 2 Q_ij from the linear
    Gram; when ``spec.sigma`` is None it is set by the median heuristic.
    """
    if feature_ids is None:
        feature_ids = np.arange(dataset.n_features)
    feature_ids = np.asarray(feature_ids, dtype=np.int64)
    _check_gram_size(feature_ids.size, limit)
    X = dataset.dense_columns(feature_ids)
    G = X.T @ X
    sigma = None
    if spec.kind == "poly2":
        G = G * G
    elif spec.kind == "gaussian":
        sigma = spec.sigma if spec.sigma is not None else median_sigma(G, seed)
        diag = np.diag(G).copy()
        d2 = np.maximum(diag[:, None] + diag[None, :] - 2.0 * G, 0.0)
        np.fill_diagonal(d2, 0.0)
        G = np.exp(-d2 / (2.0 * sigma ** 2))
    G = 0.5 * (G + G.T)
    return GramMatrix(G, spec.kind, sigma)


# -- mutual information (QPFS baseline path) -------------------------------------

def discretize(X: np.ndarray, bins: int = 3, method: str = "meanstd") -> np.ndarray:
    """Integer codes per column.

    ``meanstd`` uses three levels split at mean -/+ one standard deviation;
    ``quantile`` uses ``bins`` equal-frequency levels.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if bins < 2:
        raise DomainError("bins must be >= 2")
    if method == "meanstd":
        if bins != 3:
            raise DomainError("meanstd discretization has exactly 3 levels")
        mu = X.mean(axis=0)
        sd = X.std(axis=0)
        tol = 1e-12 * np.maximum(sd, 1e-300)
        codes = np.ones(X.shape, dtype=np.int64)
        codes[X <= mu - sd + tol] = 0
        codes[X >= mu + sd - tol] = 2
        codes[:, sd == 0] = 0
        return codes
    if method == "quantile":
        codes = np.empty(X.shape, dtype=np.int64)
        qs = np.linspace(0, 1, bins + 1)[1:-1]
        for j in range(X.shape[1]):
            edges = np.unique(np.quantile(X[:, j], qs))
            codes[:, j] = np.searchsorted(edges, X[:, j], side="right")
        return codes
    raise DomainError(f"unknown discretization {method!r}")


def _entropy(counts: np.ndarray, m: int) -> float:
    p = counts[counts > 0] / m
    return float(-(p * np.log(p)).sum())


def _mi_from_codes(a: np.ndarray, b: np.ndarray) -> float:
    m = a.size
    ka, kb = a.max() + 1, b.max() + 1
    joint = np.bincount(a * kb + b, minlength=ka * kb).reshape(ka, kb)
    h = _entropy(joint.sum(1), m) + _entropy(joint.sum(0), m) - _entropy(joint.ravel(), m)
    return max(h, 0.0)


def _dense_block(dataset: SparseDataset, limit):
    _check_gram_size(dataset.n_features, limit)
    return dataset.to_dense()


def mi_relevance(dataset: SparseDataset, bins: int = 3, method: str = "meanstd",
                 limit: int | None = None) -> RelevanceVector:
    """Plug-in mutual information (nats) between each discretized feature and the labels."""
    X = _dense_block(dataset, limit)
    codes = discretize(X, bins, method)
    _, y = np.unique(dataset.labels, return_inverse=True)
    excluded = ~dataset.selectable_mask()
    r = np.array([0.0 if excluded[j] else _mi_from_codes(codes[:, j], y)
                  for j in range(dataset.n_features)])
    return RelevanceVector(r, excluded)


def mi_matrix(dataset: SparseDataset, bins: int = 3, method: str = "meanstd",
              limit: int | None = None) -> GramMatrix:
    """Pairwise plug-in MI between discretized features; the diagonal holds entropies."""
    X = _dense_block(dataset, limit)
    codes = discretize(X, bins, method)
    m, n = codes.shape
    k = int(codes.max()) + 1 if codes.size else 1
    onehot = np.zeros((m, n * k))
    onehot[np.repeat(np.arange(m), n), (np.arange(n) * k + codes).ravel()] = 1.0
    joint = (onehot.T @ onehot).reshape(n, k, n, k).transpose(0, 2, 1, 3) / m
    marg = joint[np.arange(n), np.arange(n)].diagonal(axis1=1, axis2=2)  # n x k
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = joint / (marg[:, None, :, None] * marg[None, :, None, :])
        terms = np.where(joint > 0, joint * np.log(ratio), 0.0)
    mi = np.maximum(terms.sum(axis=(2, 3)), 0.0)
    mi = 0.5 * (mi + mi.T)
    return GramMatrix(mi, "mi")


def write_relevance_tsv(r: RelevanceVector, fh) -> None:
    fh.write("feature_id\trelevance\n")
    for j, v in enumerate(r.values.tolist()):
        fh.write(f"{j}\t{v!r}\n")


def write_matrix_text(G: GramMatrix, fh) -> None:
    np.savetxt(fh, G.values, fmt="%.17g", delimiter=" ")
