"""From dual weights to ordered feature rankings and top-K subsets."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dataset import NormalizationReport, NormState, SparseDataset, normalize
from .errors import ConfigError, DomainError, ShapeError
from .metrics import (KernelSpec, RelevanceVector, as_relevance, correlation_relevance,
                      gram_matrix, mi_matrix, mi_relevance, scale_relevance)
from .solvers import DualSolution, SolverConfig, constrained_qp_solve, mmfs_dcd

FORMAT_VERSION = "mmfs-ranking/1"
TIERS = ("support", "margin_violator", "fallback")


@dataclass(frozen=True, eq=False)
class FeatureRanking:
    feature_ids: np.ndarray
    alpha: np.ndarray
    relevance: np.ndarray
    tier: np.ndarray
    C: float
    zero_tol: float = 1e-12
    bound_tol: float = 1e-12

    def __len__(self):
        return self.feature_ids.size

    def counts(self) -> dict:
        return {t: int(np.count_nonzero(self.tier == t)) for t in TIERS}

    def equals(self, other: "FeatureRanking") -> bool:
        return (np.array_equal(self.feature_ids, other.feature_ids)
                and np.array_equal(self.alpha, other.alpha)
                and np.array_equal(self.relevance, other.relevance)
                and np.array_equal(self.tier, other.tier))

    def to_json(self, meta: dict | None = None) -> dict:
        return {
            "format": FORMAT_VERSION,
            "meta": meta or {},
            "C": self.C, "zero_tol": self.zero_tol, "bound_tol": self.bound_tol,
            "counts": self.counts(),
            "entries": [
                {"rank": i + 1, "feature_id": int(f), "alpha": float(a),
                 "relevance": float(r), "tier": str(t)}
                for i, (f, a, r, t) in enumerate(zip(self.feature_ids, self.alpha,
                                                     self.relevance, self.tier))
            ],
        }

    def write_tsv(self, fh, meta: dict | None = None, limit: int | None = None) -> None:
        fh.write(f"# format: {FORMAT_VERSION}\n")
        fh.write(f"# thresholds: {json.dumps(dict(C=self.C, zero_tol=self.zero_tol, bound_tol=self.bound_tol))}\n")
        fh.write(f"# meta: {json.dumps(meta or {}, sort_keys=True)}\n")
        fh.write("rank\tfeature_id\talpha\trelevance\ttier\n")
        n = len(self) if limit is None else min(limit, len(self))
        for i in range(n):
            fh.write(f"{i + 1}\t{self.feature_ids[i]}\t{float(self.alpha[i])!r}\t"
                     f"{float(self.relevance[i])!r}\t{self.tier[i]}\n")


def read_ranking(text: str) -> FeatureRanking:
    """Inverse of ``write_tsv`` / ``to_json`` (format detected from content)."""
    stripped = text.lstrip()
    if stripped.startswith("{"):
        doc = json.loads(stripped)
        rows = doc["entries"]
        return FeatureRanking(
            np.array([e["feature_id"] for e in rows], dtype=np.int64),
            np.array([e["alpha"] for e in rows], dtype=np.float64),
            np.array([e["relevance"] for e in rows], dtype=np.float64),
            np.array([e["tier"] for e in rows]), doc["C"], doc["zero_tol"], doc["bound_tol"])
    thresholds = dict(C=1.0, zero_tol=1e-12, bound_tol=1e-12)
    ids, alpha, rel, tier = [], [], [], []
    for line in text.splitlines():
        if line.startswith("# thresholds:"):
            thresholds = json.loads(line.split(":", 1)[1])
        if not line or line.startswith("#") or line.startswith("rank\t"):
            continue
        _, f, a, r, t = line.split("\t")
        ids.append(int(f))
        alpha.append(float(a))
        rel.append(float(r))
        tier.append(t)
    return FeatureRanking(np.array(ids, dtype=np.int64), np.array(alpha), np.array(rel),
                          np.array(tier), **thresholds)


def rank_features(solution: DualSolution, relevance, C: float | None = None,
                  zero_tol: float = 1e-12, bound_tol: float = 1e-12) -> FeatureRanking:
    """Order selectable features by (alpha desc, relevance desc, id asc).

    Features with alpha <= zero_tol form the fallback tier (reported with alpha
    0); alpha >= C - bound_tol marks margin violators. Excluded (constant)
    features are left out.
    """
    r = as_relevance(relevance)
    alpha = np.asarray(solution.alpha, dtype=np.float64)
    if alpha.shape != r.values.shape:
        raise ShapeError(f"solution has {alpha.size} weights for {r.values.size} relevances")
    if C is None:
        C = float(solution.config.get("C", 1.0))
    ids = np.flatnonzero(~r.excluded)
    a = np.where(alpha[ids] > zero_tol, alpha[ids], 0.0)
    rel = r.values[ids]
    order = np.lexsort((ids, -rel, -a))
    ids, a, rel = ids[order], a[order], rel[order]
    tier = np.where(a == 0.0, "fallback", np.where(a >= C - bound_tol, "margin_violator", "support"))
    return FeatureRanking(ids, a, rel, tier, C, zero_tol, bound_tol)


def top_k(ranking: FeatureRanking, k: int) -> np.ndarray:
    """First min(k, len(ranking)) feature ids in ranking order."""
    if k < 1:
        raise DomainError("K must be >= 1")
    return ranking.feature_ids[:k].copy()


def fallback_count(ranking: FeatureRanking, k: int) -> int:
    """How many of the top-k ids come from the zero-alpha fallback tier."""
    return int(np.count_nonzero(ranking.tier[:k] == "fallback"))


def deduplicate(ranking: FeatureRanking, groups) -> FeatureRanking:
    """Keep only the best-ranked member of each group of interchangeable features."""
    drop = set()
    position = {int(f): i for i, f in enumerate(ranking.feature_ids)}
    for g in groups:
        members = sorted((position[f] for f in g if f in position))
        drop.update(members[1:])
    keep = np.array([i not in drop for i in range(len(ranking))], dtype=bool)
    return FeatureRanking(ranking.feature_ids[keep], ranking.alpha[keep], ranking.relevance[keep],
                          ranking.tier[keep], ranking.C, ranking.zero_tol, ranking.bound_tol)


# -- end-to-end selection ------------------------------------------------------------

@dataclass(frozen=True)
class SelectorConfig:
    """Everything needed to go from raw data to a ranking."""

    solver: SolverConfig = field(default_factory=SolverConfig)
    method: str = "dcd"
    norm_mode: str = NormState.CENTERED.value
    kernel: str = "linear"
    sigma: float | None = None
    relevance: str = "correlation"
    mi_bins: int = 3
    qp_tol: float = 1e-10

    def __post_init__(self):
        if self.method not in ("dcd", "qp"):
            raise ConfigError(f"unknown solver {self.method!r}")
        if self.kernel not in ("linear", "poly2", "gaussian", "mi"):
            raise ConfigError(f"unknown kernel {self.kernel!r}")
        if self.method == "dcd" and self.kernel != "linear":
            raise ConfigError("the dcd solver needs explicit features (linear kernel); use --solver qp")
        if self.relevance not in ("correlation", "mi"):
            raise ConfigError(f"unknown relevance {self.relevance!r}")


@dataclass(frozen=True, eq=False)
class Selection:
    ranking: FeatureRanking
    solution: DualSolution
    relevance: RelevanceVector
    report: NormalizationReport
    data: SparseDataset


def select_features(raw: SparseDataset, config: SelectorConfig = SelectorConfig()) -> Selection:
    """Normalize, score relevance, solve the dual and rank."""
    data, report = normalize(raw, config.norm_mode)
    if config.relevance == "mi":
        r = mi_relevance(data, config.mi_bins)
    else:
        r = correlation_relevance(data)
    sc = config.solver
    if config.method == "dcd":
        solution = mmfs_dcd(data, scale_relevance(r, sc.theta), sc)
    else:
        ids = np.flatnonzero(~r.excluded)
        if config.kernel == "mi":
            Q = mi_matrix(data, config.mi_bins).values[np.ix_(ids, ids)]
        else:
            Q = gram_matrix(data, KernelSpec(config.kernel, config.sigma), feature_ids=ids,
                            seed=sc.rng_seed).values
        sub = constrained_qp_solve(Q, r.values[ids], sc.theta, sc.C, tol=config.qp_tol,
                                   seed=sc.rng_seed)
        alpha = np.zeros(data.n_features)
        alpha[ids] = sub.alpha
        solution = DualSolution(alpha, None, sub.b, sub.dual_objective, None, sub.sweeps_used,
                                sub.max_pg_violation, sub.status, sub.sum_alpha, sub.config)
    ranking = rank_features(solution, r, C=sc.C)
    return Selection(ranking, solution, r, report, data)
