"""Sparse labeled data in feature-major layout.

Only the columns that hold at least one nonzero are materialized
(``feature_ids`` lists them in ascending order and ``indptr`` delimits their
entries), so storage is ``O(nnz)`` regardless of the declared number of
features. Features that are never stored are all-zero and therefore constant.
"""

from __future__ import annotations

import enum
import hashlib
import io
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import scipy.sparse as sp

from .errors import CapacityError, ParseError, ShapeError, StateError

DENSE_LIMIT_ENV = "MMFS_DENSE_LIMIT"
DEFAULT_DENSE_LIMIT = 50_000_000
CACHE_VERSION = 1


def dense_limit() -> int:
    """Maximum number of dense values the library will materialize."""
    value = os.environ.get(DENSE_LIMIT_ENV)
    return int(float(value)) if value else DEFAULT_DENSE_LIMIT


class NormState(str, enum.Enum):
    RAW = "raw"
    UNIT_NORM = "unit_norm"
    CENTERED = "centered_unit_norm"


def _readonly(a, dtype):
    a = np.asarray(a, dtype=dtype)
    if a.flags.writeable or not a.flags.c_contiguous:
        a = np.array(a, dtype=dtype, order="C")
        a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class SparseDataset:
    """Instances x features matrix stored column by column, plus labels."""

    n_instances: int
    n_features: int
    feature_ids: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    labels: np.ndarray
    norm_state: NormState = NormState.RAW
    constant_ids: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))

    def __post_init__(self):
        object.__setattr__(self, "norm_state", NormState(self.norm_state))
        for name, dtype in (("feature_ids", np.int64), ("indptr", np.int64),
                            ("indices", np.int64), ("data", np.float64),
                            ("labels", np.float64), ("constant_ids", np.int64)):
            object.__setattr__(self, name, _readonly(getattr(self, name), dtype))
        if self.indptr.shape != (self.feature_ids.size + 1,):
            raise ShapeError("indptr must have one entry per stored column plus one")
        if self.labels.shape != (self.n_instances,):
            raise ShapeError(f"expected {self.n_instances} labels, got {self.labels.size}")

    # -- construction -----------------------------------------------------
    @classmethod
    def from_triplets(cls, rows, cols, vals, labels, n_features=None, **kw):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.float64)
        keep = vals != 0
        rows, cols, vals = rows[keep], cols[keep], vals[keep]
        if n_features is None:
            n_features = int(cols.max()) + 1 if cols.size else 0
        order = np.lexsort((rows, cols))
        rows, cols, vals = rows[order], cols[order], vals[order]
        feature_ids, starts = np.unique(cols, return_index=True)
        indptr = np.append(starts, cols.size)
        return cls(labels.size, int(n_features), feature_ids, indptr, rows, vals, labels, **kw)

    @classmethod
    def from_dense(cls, X, labels, **kw):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise ShapeError("expected a 2-D matrix")
        return cls.from_columns(X, np.arange(X.shape[1]), labels, X.shape[1], **kw)

    @classmethod
    def from_columns(cls, X, column_ids, labels, n_features, **kw):
        """Build from a dense M x k block whose columns hold the given feature ids."""
        Xt = np.ascontiguousarray(np.asarray(X, dtype=np.float64).T)
        nz = Xt != 0
        counts = nz.sum(axis=1)
        keep = counts > 0
        indptr = np.concatenate(([0], np.cumsum(counts[keep])))
        indices = np.flatnonzero(nz)
        indices %= Xt.shape[1]
        data = Xt[nz]
        # freshly built and owned here, so freeze instead of copying
        for a in (indptr, indices, data):
            a.flags.writeable = False
        return cls(Xt.shape[1], int(n_features), np.asarray(column_ids)[keep], indptr, indices,
                   data, labels, **kw)

    # -- basic accessors ---------------------------------------------------
    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    @property
    def n_stored(self) -> int:
        return int(self.feature_ids.size)

    def _slot(self, feature_id: int) -> int:
        if not 0 <= feature_id < self.n_features:
            raise IndexError(f"feature id {feature_id} out of range [0, {self.n_features})")
        k = int(np.searchsorted(self.feature_ids, feature_id))
        if k < self.feature_ids.size and self.feature_ids[k] == feature_id:
            return k
        return -1

    def column(self, feature_id: int):
        """(instance indices, values) of one feature."""
        k = self._slot(feature_id)
        if k < 0:
            return self.indices[:0], self.data[:0]
        lo, hi = self.indptr[k], self.indptr[k + 1]
        return self.indices[lo:hi], self.data[lo:hi]

    def selectable_mask(self) -> np.ndarray:
        """True for features that may enter a ranking (stored and non-constant)."""
        mask = np.zeros(self.n_features, dtype=bool)
        mask[self.feature_ids] = True
        mask[self.constant_ids] = False
        return mask

    def to_csc(self) -> sp.csc_matrix:
        """Compact CSC matrix over the stored columns only (M x n_stored)."""
        return sp.csc_matrix((self.data, self.indices, self.indptr),
                             shape=(self.n_instances, self.n_stored))

    def dense_columns(self, feature_ids) -> np.ndarray:
        """Dense M x len(feature_ids) block; unstored features are zero columns."""
        feature_ids = np.asarray(feature_ids, dtype=np.int64)
        out = np.zeros((self.n_instances, feature_ids.size))
        for j, fid in enumerate(feature_ids):
            idx, val = self.column(int(fid))
            out[idx, j] = val
        return out

    def to_dense(self, limit=None) -> np.ndarray:
        limit = dense_limit() if limit is None else limit
        if self.n_instances * self.n_features > limit:
            raise CapacityError(
                f"dense {self.n_instances}x{self.n_features} exceeds the dense limit {limit}")
        out = np.zeros((self.n_instances, self.n_features))
        out[:, self.feature_ids] = self.to_csc().toarray()
        return out

    def subset_instances(self, rows) -> "SparseDataset":
        """Raw dataset restricted to the given instance indices, in that order."""
        if self.norm_state is not NormState.RAW:
            raise StateError("instance subsets are taken from raw data only")
        rows = np.asarray(rows, dtype=np.int64)
        remap = np.full(self.n_instances, -1, dtype=np.int64)
        remap[rows] = np.arange(rows.size)
        cols = np.repeat(self.feature_ids, np.diff(self.indptr))
        new_rows = remap[self.indices]
        keep = new_rows >= 0
        return SparseDataset.from_triplets(new_rows[keep], cols[keep], self.data[keep],
                                           self.labels[rows], n_features=self.n_features)

    def validate(self) -> None:
        """Raise AssertionError if a structural invariant does not hold."""
        assert self.indptr[0] == 0 and self.indptr[-1] == self.nnz
        assert np.all(np.diff(self.feature_ids) > 0)
        if self.feature_ids.size:
            assert 0 <= self.feature_ids[0] and self.feature_ids[-1] < self.n_features
        assert np.all(np.diff(self.indptr) > 0), "stored columns must be nonempty"
        if self.nnz:
            assert self.indices.min() >= 0 and self.indices.max() < self.n_instances
        starts = np.zeros(self.nnz, dtype=bool)
        starts[self.indptr[:-1]] = True
        steps = np.diff(self.indices)
        assert np.all((steps > 0) | starts[1:]), "indices must increase within a column"
        assert np.all(self.data != 0), "explicit zeros stored"
        if self.norm_state is not NormState.RAW:
            assert abs(np.linalg.norm(self.labels) - 1) <= 1e-9
        if self.norm_state is NormState.CENTERED:
            assert abs(self.labels.mean()) <= 1e-9
            csc = self.to_csc()
            sel = ~np.isin(self.feature_ids, self.constant_ids)
            sums = np.asarray(csc.sum(axis=0)).ravel()[sel]
            norms = np.sqrt(np.asarray(csc.multiply(csc).sum(axis=0)).ravel()[sel])
            assert np.all(np.abs(sums) / self.n_instances <= 1e-9)
            assert np.all(np.abs(norms - 1) <= 1e-9)


def column_dot(dataset: SparseDataset, feature_id: int, vector) -> float:
    """Dot product of one feature column with a dense length-M vector."""
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (dataset.n_instances,):
        raise ShapeError(f"vector must have length {dataset.n_instances}")
    idx, val = dataset.column(feature_id)
    return float(val @ vector[idx])


def duplicate_groups(dataset: SparseDataset) -> list[list[int]]:
    """Groups (size >= 2) of features whose stored columns are bit-identical."""
    buckets: dict[bytes, list[int]] = {}
    for k, fid in enumerate(dataset.feature_ids):
        lo, hi = dataset.indptr[k], dataset.indptr[k + 1]
        h = hashlib.blake2b(dataset.indices[lo:hi].tobytes(), digest_size=16)
        h.update(dataset.data[lo:hi].tobytes())
        buckets.setdefault(h.digest(), []).append(int(fid))
    return [g for g in buckets.values() if len(g) > 1]


# -- SVMlight text format ---------------------------------------------------

def _iter_lines(source):
    if isinstance(source, str):
        return io.StringIO(source)
    return source


def _map_labels(labels: np.ndarray) -> np.ndarray:
    distinct = np.unique(labels)
    if distinct.size > 2:
        raise ParseError(f"multiclass labels are not supported ({distinct.size} distinct values)")
    if distinct.size == 2:
        return np.where(labels == distinct[0], -1.0, 1.0)
    return labels


def parse_svmlight(source: str | Iterable[str], one_based: bool = True,
                   n_features: int | None = None) -> SparseDataset:
    """Parse SVMlight/libsvm text (a string or an iterable of lines).

    Lines look like ``<label> <idx>:<val> ...`` with strictly increasing
    indices; ``#`` starts a comment. Two distinct label values are mapped to
    -1/+1 (smaller to -1). Zero values are dropped.
    """
    offset = 1 if one_based else 0
    labels: list[float] = []
    rows = np.empty(1024, dtype=np.int64)
    cols = np.empty(1024, dtype=np.int64)
    vals = np.empty(1024, dtype=np.float64)
    n = 0
    max_col = -1
    for lineno, line in enumerate(_iter_lines(source), start=1):
        line = line.split("#", 1)[0].replace("−", "-")
        tokens = line.split()
        if not tokens:
            continue
        try:
            label = float(tokens[0])
        except ValueError:
            raise ParseError(f"bad label {tokens[0]!r}", lineno) from None
        row = len(labels)
        labels.append(label)
        need = n + len(tokens) - 1
        if need > rows.size:
            size = max(need, 2 * rows.size)
            rows, cols, vals = (np.resize(a, size) for a in (rows, cols, vals))
        prev = -1
        for tok in tokens[1:]:
            idx, sep, val = tok.partition(":")
            try:
                if not sep:
                    raise ValueError
                j = int(idx) - offset
                v = float(val)
            except ValueError:
                raise ParseError(f"malformed token {tok!r}", lineno) from None
            if j < 0:
                raise ParseError(f"index {idx} below the {'1' if one_based else '0'}-based minimum", lineno)
            if j <= prev:
                raise ParseError(f"indices not strictly increasing at {tok!r}", lineno)
            prev = j
            if v != 0.0:
                rows[n] = row
                cols[n] = j
                vals[n] = v
                n += 1
        max_col = max(max_col, prev)
    if not labels:
        raise ParseError("no instances")
    if n_features is None:
        n_features = max_col + 1
    elif max_col >= n_features:
        raise ParseError(f"feature index {max_col + offset} exceeds declared {n_features} features")
    y = _map_labels(np.asarray(labels))
    return SparseDataset.from_triplets(rows[:n], cols[:n], vals[:n], y, n_features=n_features)


def load_svmlight(path, one_based: bool = True, n_features: int | None = None) -> SparseDataset:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_svmlight(fh, one_based=one_based, n_features=n_features)


def _fmt_label(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def dump_svmlight(dataset: SparseDataset, one_based: bool = True) -> str:
    """Serialize to SVMlight text; floats use shortest round-trip repr."""
    offset = 1 if one_based else 0
    csr = dataset.to_csc().tocsr()
    csr.sort_indices()
    ids = dataset.feature_ids + offset
    out = io.StringIO()
    for i in range(dataset.n_instances):
        lo, hi = csr.indptr[i], csr.indptr[i + 1]
        parts = [_fmt_label(dataset.labels[i])]
        parts.extend(f"{ids[j]}:{v!r}" for j, v in zip(csr.indices[lo:hi], csr.data[lo:hi].tolist()))
        out.write(" ".join(parts))
        out.write("\n")
    return out.getvalue()


# -- binary cache -------------------------------------------------------------

def save_cache(dataset: SparseDataset, path) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, version=CACHE_VERSION,
                 shape=np.array([dataset.n_instances, dataset.n_features]),
                 feature_ids=dataset.feature_ids, indptr=dataset.indptr,
                 indices=dataset.indices, data=dataset.data, labels=dataset.labels,
                 constant_ids=dataset.constant_ids,
                 norm_state=np.array(dataset.norm_state.value))


def load_cache(path) -> SparseDataset:
    with np.load(Path(path), allow_pickle=False) as z:
        if int(z["version"]) != CACHE_VERSION:
            raise ParseError(f"unsupported cache version {int(z['version'])}")
        m, n = (int(v) for v in z["shape"])
        return SparseDataset(m, n, z["feature_ids"], z["indptr"], z["indices"], z["data"],
                             z["labels"], NormState(str(z["norm_state"])), z["constant_ids"])


# -- normalization --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NormalizationReport:
    """Per-column statistics used to normalize a raw dataset.

    Arrays are aligned with ``feature_ids`` (the raw stored columns); any other
    feature is all-zero, hence constant with mean 0 and scale 1.
    """

    mode: NormState
    feature_ids: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    constant: np.ndarray
    label_mean: float
    label_scale: float

    @property
    def constant_ids(self) -> np.ndarray:
        return self.feature_ids[self.constant]

    def lookup(self, feature_ids):
        """(mean, scale) for arbitrary feature ids."""
        feature_ids = np.asarray(feature_ids, dtype=np.int64)
        mean = np.zeros(feature_ids.size)
        scale = np.ones(feature_ids.size)
        if self.feature_ids.size:
            k = np.minimum(np.searchsorted(self.feature_ids, feature_ids), self.feature_ids.size - 1)
            hit = self.feature_ids[k] == feature_ids
            mean[hit] = self.mean[k[hit]]
            scale[hit] = self.scale[k[hit]]
        return mean, scale

    def transform_columns(self, raw: SparseDataset, feature_ids) -> np.ndarray:
        """Dense normalized block of ``raw`` (possibly held-out rows) for the given features."""
        X = raw.dense_columns(feature_ids)
        mean, scale = self.lookup(feature_ids)
        if self.mode is NormState.CENTERED:
            X -= mean
        return X / scale


def normalize(dataset: SparseDataset, mode: NormState | str = NormState.CENTERED,
              limit: int | None = None) -> tuple[SparseDataset, NormalizationReport]:
    """Scale every column (and the labels) to unit L2 norm, optionally centering first.

    Centering densifies the matrix, so it is refused when M*N exceeds the dense
    limit. Zero-variance columns are flagged constant and excluded from
    selection downstream; centering turns them into empty columns, unit_norm
    leaves their values untouched.
    """
    mode = NormState(mode)
    if mode is NormState.RAW:
        raise StateError("normalization mode must be unit_norm or centered_unit_norm")
    if dataset.norm_state is not NormState.RAW:
        raise StateError(f"dataset is already normalized ({dataset.norm_state.value})")
    m = dataset.n_instances
    limit = dense_limit() if limit is None else limit
    if mode is NormState.CENTERED and m * dataset.n_features > limit:
        raise CapacityError(
            f"centering {m}x{dataset.n_features} data exceeds the dense limit {limit}; "
            "use unit_norm to keep the matrix sparse")

    counts = np.diff(dataset.indptr)
    starts = dataset.indptr[:-1]
    data = dataset.data
    if dataset.n_stored:
        sums = np.add.reduceat(data, starts)
        sumsq = np.add.reduceat(data * data, starts)
        mean = sums / m
        dev = data - np.repeat(mean, counts)
        css = np.add.reduceat(dev * dev, starts) + (m - counts) * mean * mean
    else:
        sums = sumsq = mean = css = np.zeros(0)
    constant = css <= 1e-24 * np.maximum(sumsq, np.finfo(float).tiny)

    y = dataset.labels
    if mode is NormState.CENTERED:
        scale = np.where(constant, 1.0, np.sqrt(css))
        X = dataset.to_csc().toarray(order="F")
        X -= mean
        X /= scale
        X[:, constant] = 0.0
        label_mean = float(y.mean())
        yc = y - label_mean
    else:
        scale = np.where(constant, 1.0, np.sqrt(sumsq))
        divisor = np.repeat(np.where(constant, 1.0, scale), counts)
        X = None
        label_mean = 0.0
        yc = y
    label_scale = float(np.linalg.norm(yc))
    if label_scale == 0:
        raise StateError("labels have zero variance; relevance is undefined")

    report = NormalizationReport(mode, dataset.feature_ids.copy(), mean, scale, constant,
                                 label_mean, label_scale)
    if X is not None:
        # centered constant columns are all zero, so they drop out of storage entirely
        new = SparseDataset.from_columns(X, dataset.feature_ids, yc / label_scale,
                                         dataset.n_features, norm_state=mode)
    else:
        scaled = data / divisor
        if np.all(scaled != 0):
            new = SparseDataset(m, dataset.n_features, dataset.feature_ids, dataset.indptr,
                                dataset.indices, scaled, yc / label_scale, mode,
                                dataset.feature_ids[constant])
        else:
            # subnormal inputs can underflow to zero; drop them rather than store zeros
            new = SparseDataset.from_triplets(
                dataset.indices, np.repeat(dataset.feature_ids, counts), scaled,
                yc / label_scale, n_features=dataset.n_features, norm_state=mode,
                constant_ids=dataset.feature_ids[constant])
    return new, report

