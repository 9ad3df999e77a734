"""Downstream accuracy of selected feature subsets.

The classifier is an L2-regularized squared-hinge linear SVM with an appended
constant bias feature, trained by dual coordinate descent. Protocols are
leave-one-out, a fixed train/test split, and repeated stratified random splits.
"""

from __future__ import annotations

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numba
import numpy as np

from .dataset import SparseDataset, normalize
from .errors import CapacityError, DegenerateModelWarning, DomainError
from .selection import FeatureRanking, SelectorConfig, fallback_count, select_features, top_k
from .solvers.dcd import shuffle_prefix

LOOCV_LIMIT = 2000
K_GRID_SMALL = tuple(range(2, 101))
K_GRID_LARGE = (5,) + tuple(range(10, 201, 10))


# -- classifier ---------------------------------------------------------------------------

@numba.njit(cache=True, nogil=True)
def _l2svm_kernel(X, y, C, eps, max_iter, seed, alpha, w):
    m, d = X.shape
    diag = 0.5 / C
    qd = np.empty(m)
    for i in range(m):
        qd[i] = diag + np.dot(X[i], X[i])
    index = np.arange(m)
    state = np.empty(1, dtype=np.uint64)
    state[0] = np.uint64(seed)
    active = m
    pg_max_old = np.inf
    pg_min_old = -np.inf
    it = 0
    while it < max_iter:
        pg_max_new = -np.inf
        pg_min_new = np.inf
        shuffle_prefix(index, active, state)
        s = 0
        while s < active:
            i = index[s]
            g = y[i] * np.dot(w, X[i]) - 1.0 + diag * alpha[i]
            pg = 0.0
            if alpha[i] == 0.0:
                if g > pg_max_old:
                    active -= 1
                    index[s] = index[active]
                    index[active] = i
                    continue
                if g < 0.0:
                    pg = g
            else:
                pg = g
            pg_max_new = max(pg_max_new, pg)
            pg_min_new = min(pg_min_new, pg)
            if abs(pg) > 1e-12:
                old = alpha[i]
                alpha[i] = max(old - g / qd[i], 0.0)
                step = (alpha[i] - old) * y[i]
                for j in range(d):
                    w[j] += step * X[i, j]
            s += 1
        it += 1
        if pg_max_new - pg_min_new <= eps:
            if active == m:
                break
            active = m
            pg_max_old = np.inf
            pg_min_old = -np.inf
            continue
        pg_max_old = pg_max_new if pg_max_new > 0.0 else np.inf
        pg_min_old = pg_min_new if pg_min_new < 0.0 else -np.inf
    return it


@dataclass(frozen=True, eq=False)
class LinearModel:
    weights: np.ndarray  # feature weights followed by the bias weight
    dual_objective: float
    iterations: int
    degenerate: bool = False
    majority: float = 1.0

    def decision_function(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return X @ self.weights[:-1] + self.weights[-1]

    def predict(self, X) -> np.ndarray:
        if self.degenerate:
            return np.full(np.asarray(X).shape[0], self.majority)
        return np.where(self.decision_function(X) >= 0, 1.0, -1.0)


def train_linear_svm(X, y, C: float = 1.0, eps: float = 0.1, max_iter: int = 1000,
                     seed: int = 0) -> LinearModel:
    """min 1/2 ||v||^2 + C sum max(0, 1 - y_i v.[x_i, 1])^2 by dual coordinate descent."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not C > 0:
        raise DomainError("C must be > 0")
    classes = np.unique(y)
    if classes.size < 2:
        warnings.warn("training set holds a single class; predicting it everywhere",
                      DegenerateModelWarning, stacklevel=2)
        label = float(classes[0]) if classes.size else 1.0
        return LinearModel(np.zeros(X.shape[1] + 1), 0.0, 0, True, label)
    Xb = np.hstack([X, np.ones((X.shape[0], 1))])
    alpha = np.zeros(X.shape[0])
    w = np.zeros(Xb.shape[1])
    iters = _l2svm_kernel(Xb, y, float(C), float(eps), int(max_iter), int(seed), alpha, w)
    dual = 0.5 * (w @ w) + (0.25 / C) * (alpha @ alpha) - alpha.sum()
    return LinearModel(w, float(dual), int(iters))


def accuracy(model: LinearModel, X, y) -> float:
    return 100.0 * float(np.mean(model.predict(X) == np.asarray(y)))


# -- protocols ------------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EvalProtocol:
    kind: str
    n_repeats: int = 1
    test_fraction: float = 0.3
    seed: int = 0
    test_data: SparseDataset | None = None

    def __post_init__(self):
        if self.kind not in ("loocv", "fixed_split", "random_splits"):
            raise DomainError(f"unknown protocol {self.kind!r}")
        if self.kind == "random_splits":
            if not 0.0 < self.test_fraction < 1.0:
                raise DomainError("test_fraction must lie in (0, 1)")
            if self.n_repeats < 1:
                raise DomainError("n_repeats must be >= 1")
        if self.kind == "fixed_split" and self.test_data is None:
            raise DomainError("fixed_split needs a test dataset")

    @classmethod
    def loocv(cls):
        return cls("loocv")

    @classmethod
    def fixed_split(cls, test_data: SparseDataset):
        return cls("fixed_split", test_data=test_data)

    @classmethod
    def random_splits(cls, n_repeats: int = 10, test_fraction: float = 0.3, seed: int = 0):
        return cls("random_splits", n_repeats, test_fraction, seed)

    @property
    def deterministic(self) -> bool:
        return self.kind != "random_splits"

    def describe(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "random_splits":
            out.update(n_repeats=self.n_repeats, test_fraction=self.test_fraction, seed=self.seed)
        return out


def stratified_split(labels, test_fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    test = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        members = members[rng.permutation(members.size)]
        n_test = int(round(test_fraction * members.size))
        n_test = min(max(n_test, 1), members.size - 1) if members.size > 1 else 0
        test.append(members[:n_test])
    test = np.sort(np.concatenate(test))
    train = np.setdiff1d(np.arange(labels.size), test)
    return train, test


def make_folds(dataset: SparseDataset, protocol: EvalProtocol, limit: int = LOOCV_LIMIT):
    """List of (train_rows, test_rows); for fixed_split test rows index the test dataset."""
    m = dataset.n_instances
    if protocol.kind == "loocv":
        if m > limit:
            raise CapacityError(f"LOOCV over {m} instances exceeds the limit of {limit}")
        every = np.arange(m)
        return [(np.delete(every, i), np.array([i])) for i in range(m)]
    if protocol.kind == "fixed_split":
        return [(np.arange(m), np.arange(protocol.test_data.n_instances))]
    rng = np.random.default_rng(protocol.seed)
    return [stratified_split(dataset.labels, protocol.test_fraction, rng)
            for _ in range(protocol.n_repeats)]


# -- evaluation -------------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalRow:
    k: int
    mean_accuracy: float
    std: float
    n_fallback: float


@dataclass(frozen=True, eq=False)
class EvalReport:
    rows: list
    protocol: dict
    classifier: dict
    selector: dict = field(default_factory=dict)
    paper_mode: bool = False

    @property
    def best(self) -> EvalRow:
        # ties resolve to the smallest K
        return max(self.rows, key=lambda row: (row.mean_accuracy, -row.k))

    def to_json(self, meta: dict | None = None) -> dict:
        return {
            "format": "mmfs-eval/1",
            "meta": meta or {},
            "protocol": self.protocol,
            "classifier": self.classifier,
            "selector": self.selector,
            "paper_mode": self.paper_mode,
            "rows": [asdict(r) for r in self.rows],
            "best": asdict(self.best),
        }

    def write_tsv(self, fh, meta: dict | None = None) -> None:
        fh.write("# format: mmfs-eval/1\n")
        fh.write(f"# meta: {json.dumps(meta or {}, sort_keys=True)}\n")
        fh.write(f"# protocol: {json.dumps(self.protocol, sort_keys=True)}\n")
        fh.write(f"# classifier: {json.dumps(self.classifier, sort_keys=True)}\n")
        b = self.best
        fh.write(f"# best: K={b.k} accuracy={b.mean_accuracy:.2f}\n")
        fh.write("K\tmean_accuracy\tstd\tn_fallback\n")
        for r in self.rows:
            fh.write(f"{r.k}\t{r.mean_accuracy:.2f}\t{r.std:.2f}\t{r.n_fallback:g}\n")


def _fold_outcome(train_raw, test_raw, k_grid, selector, ranking, fixed_report, C_clf, clf_eps, seed):
    """Per-K (correct, n_test, n_fallback) for one fold."""
    if ranking is None:
        sel = select_features(train_raw, selector)
        ranking, report = sel.ranking, sel.report
    else:
        report = fixed_report
    out = []
    for k in k_grid:
        ids = np.sort(top_k(ranking, k))
        X_tr = report.transform_columns(train_raw, ids)
        X_te = report.transform_columns(test_raw, ids)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateModelWarning)
            model = train_linear_svm(X_tr, train_raw.labels, C_clf, clf_eps, seed=seed)
        correct = int(np.count_nonzero(model.predict(X_te) == test_raw.labels))
        out.append((correct, test_raw.n_instances, fallback_count(ranking, k)))
    return out


def evaluate_folds(dataset: SparseDataset, folds, k_grid, protocol: EvalProtocol,
                   ranking: FeatureRanking | None = None,
                   selector: SelectorConfig = SelectorConfig(), C_clf: float = 1.0,
                   clf_eps: float = 0.1, paper_mode: bool = False, jobs: int = 1) -> EvalReport:
    """Evaluate explicit (train_rows, test_rows) folds.

    Without ``ranking`` and with ``paper_mode`` off, normalization, relevance and
    the dual solve are redone on each training fold, so held-out rows never
    influence selection.
    """
    k_grid = [int(k) for k in k_grid]
    if not k_grid or any(k < 1 for k in k_grid) or k_grid != sorted(set(k_grid)):
        raise DomainError("K grid must be a nonempty strictly ascending list of positive ints")
    fixed_report = None
    if paper_mode and ranking is None:
        ranking = select_features(dataset, selector).ranking
    if ranking is not None:
        paper_mode = True
        fixed_report = normalize(dataset, selector.norm_mode)[1]
    test_source = protocol.test_data if protocol.kind == "fixed_split" else dataset
    seed = selector.solver.rng_seed

    def run(fold):
        train_rows, test_rows = fold
        return _fold_outcome(dataset.subset_instances(train_rows),
                             test_source.subset_instances(test_rows),
                             k_grid, selector, ranking, fixed_report, C_clf, clf_eps, seed)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(run, folds))
    else:
        outcomes = [run(f) for f in folds]

    rows = []
    for j, k in enumerate(k_grid):
        correct = np.array([o[j][0] for o in outcomes], dtype=np.float64)
        n_test = np.array([o[j][1] for o in outcomes], dtype=np.float64)
        n_fb = float(np.mean([o[j][2] for o in outcomes]))
        if protocol.deterministic:
            mean, std = 100.0 * correct.sum() / n_test.sum(), 0.0
        else:
            accs = 100.0 * correct / n_test
            mean = float(accs.mean())
            std = float(accs.std(ddof=1)) if accs.size > 1 else 0.0
        rows.append(EvalRow(k, float(mean), std, n_fb))
    return EvalReport(rows, protocol.describe(), dict(C=C_clf, eps=clf_eps, loss="squared_hinge"),
                      _selector_echo(selector), paper_mode)


def evaluate(dataset: SparseDataset, k_grid, protocol: EvalProtocol,
             ranking: FeatureRanking | None = None, selector: SelectorConfig = SelectorConfig(),
             C_clf: float = 1.0, clf_eps: float = 0.1, paper_mode: bool = False,
             jobs: int = 1, loocv_limit: int = LOOCV_LIMIT) -> EvalReport:
    """Accuracy of the top-K features for every K in ``k_grid`` under ``protocol``.

    A supplied ``ranking`` is used as-is for every fold (whole-data selection);
    ``paper_mode`` computes that ranking from all of ``dataset`` first.
    """
    folds = make_folds(dataset, protocol, loocv_limit)
    return evaluate_folds(dataset, folds, k_grid, protocol, ranking, selector, C_clf, clf_eps,
                          paper_mode, jobs)


def _selector_echo(selector: SelectorConfig) -> dict:
    out = asdict(selector)
    return out


@dataclass(frozen=True)
class SweepCell:
    gamma: float
    k: int
    mean_accuracy: float
    std: float


def sweep_gamma(dataset: SparseDataset, gamma_grid, k_grid, protocol: EvalProtocol,
                selector: SelectorConfig = SelectorConfig(), C_clf: float = 1.0,
                clf_eps: float = 0.1, paper_mode: bool = False, jobs: int = 1) -> list[SweepCell]:
    """Accuracy surface over (gamma, K); one selection per gamma per fold."""
    if len(gamma_grid) == 0:
        raise DomainError("gamma grid is empty")
    cells = []
    for gamma in gamma_grid:
        sel = replace(selector, solver=replace(selector.solver, gamma=float(gamma)))
        report = evaluate(dataset, k_grid, protocol, selector=sel, C_clf=C_clf,
                          clf_eps=clf_eps, paper_mode=paper_mode, jobs=jobs)
        cells.extend(SweepCell(float(gamma), r.k, r.mean_accuracy, r.std) for r in report.rows)
    return cells


def write_sweep_csv(cells, fh, meta: dict | None = None) -> None:
    fh.write("# format: mmfs-sweep/1\n")
    fh.write(f"# meta: {json.dumps(meta or {}, sort_keys=True)}\n")
    fh.write("gamma,K,mean_acc,std\n")
    for c in cells:
        fh.write(f"{c.gamma!r},{c.k},{c.mean_accuracy:.2f},{c.std:.2f}\n")
