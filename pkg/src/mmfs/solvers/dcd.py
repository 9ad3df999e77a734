"""Dual coordinate descent for the max-margin feature selection dual.

The solver minimizes

    f(alpha) = 1/2 alpha' Q alpha + gamma/2 (sum alpha)^2 - r' alpha,  0 <= alpha <= C

with Q_ij = f_i . f_j, never forming Q: it maintains w = sum_j alpha_j f_j and
s = sum_j alpha_j, so each coordinate gradient costs one sparse column dot.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numba
import numpy as np

from ..dataset import NormState, SparseDataset
from ..errors import DomainError, ShapeError, StateError
from ..metrics import RelevanceVector, as_relevance

STATUS = ("converged", "max_sweeps", "diverged")
RECOMPUTE_EVERY = 100


@dataclass(frozen=True)
class SolverConfig:
    C: float = 1.0
    gamma: float = 1.0
    theta: float = 0.5
    eps: float = 1e-3
    max_sweeps: int = 1000
    shrinking: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if not self.C > 0:
            raise DomainError("C must be > 0")
        if not self.gamma > 0:
            raise DomainError("gamma must be > 0")
        if not self.eps > 0:
            raise DomainError("eps must be > 0")
        if not 0.0 <= self.theta <= 1.0:
            raise DomainError("theta must lie in [0, 1]")
        if self.max_sweeps < 1:
            raise DomainError("max_sweeps must be >= 1")


@dataclass(frozen=True, eq=False)
class DualSolution:
    alpha: np.ndarray
    w: np.ndarray | None
    b: float
    dual_objective: float
    primal_objective: float | None
    sweeps_used: int
    max_pg_violation: float
    status: str
    sum_alpha: float
    config: dict = field(default_factory=dict)
    # populated only by check=True solves
    max_objective_increase: float | None = None
    box_violations: int | None = None

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def to_json(self, include_w: bool = False) -> dict:
        nz = np.flatnonzero(self.alpha)
        out = {
            "config": self.config,
            "status": self.status,
            "dual_objective": self.dual_objective,
            "primal_objective": self.primal_objective,
            "bias": self.b,
            "sweeps_used": self.sweeps_used,
            "max_pg_violation": self.max_pg_violation,
            "sum_alpha": self.sum_alpha,
            "n_features": int(self.alpha.size),
            "alpha": {str(int(i)): float(self.alpha[i]) for i in nz},
        }
        if include_w and self.w is not None:
            out["w"] = self.w.tolist()
        return out

    def dumps(self, include_w: bool = False) -> str:
        return json.dumps(self.to_json(include_w), indent=2, sort_keys=True)


# -- kernels ------------------------------------------------------------------------

@numba.njit(cache=True, nogil=True)
def _next_u64(state):
    # splitmix64; state is a length-1 uint64 array
    state[0] += np.uint64(0x9E3779B97F4A7C15)
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@numba.njit(cache=True, nogil=True)
def shuffle_prefix(index, n, state):
    for j in range(n - 1, 0, -1):
        k = np.int64(_next_u64(state) % np.uint64(j + 1))
        t = index[j]
        index[j] = index[k]
        index[k] = t


@numba.njit(cache=True, nogil=True)
def _rebuild(indptr, indices, data, alpha, w):
    w[:] = 0.0
    s = 0.0
    for k in range(alpha.size):
        a = alpha[k]
        if a != 0.0:
            s += a
            for p in range(indptr[k], indptr[k + 1]):
                w[indices[p]] += a * data[p]
    return s


@numba.njit(cache=True, nogil=True)
def _objective_fresh(indptr, indices, data, alpha, r, gamma, scratch):
    s = _rebuild(indptr, indices, data, alpha, scratch)
    return 0.5 * np.dot(scratch, scratch) + 0.5 * gamma * s * s - np.dot(r, alpha)


@numba.njit(cache=True, nogil=True)
def _gradient(indptr, indices, data, k, w, gs, r):
    g = gs - r[k]
    for p in range(indptr[k], indptr[k + 1]):
        g += data[p] * w[indices[p]]
    return g


@numba.njit(cache=True, nogil=True)
def _dcd_kernel(indptr, indices, data, r, active, C, gamma, eps, max_sweeps,
                shrinking, seed, check, alpha, w):
    """Coordinates are compact column slots; ``active`` lists the ones allowed to move."""
    n_active = active.size
    qd = np.empty(r.size)
    for k in range(r.size):
        acc = 0.0
        for p in range(indptr[k], indptr[k + 1]):
            acc += data[p] * data[p]
        qd[k] = acc + gamma
    index = active.copy()
    state = np.empty(1, dtype=np.uint64)
    state[0] = np.uint64(seed)
    s = _rebuild(indptr, indices, data, alpha, w)

    scratch = np.zeros(w.size)
    f_prev = 0.0
    max_increase = -np.inf
    box_bad = 0
    if check:
        f_prev = _objective_fresh(indptr, indices, data, alpha, r, gamma, scratch)

    pg_max_old = np.inf
    pg_min_old = -np.inf
    active_size = n_active
    status = 1
    sweep = 0
    while sweep < max_sweeps:
        sweep += 1
        shuffle_prefix(index, active_size, state)
        pg_max_new = 0.0
        pg_min_new = 0.0
        diverged = False
        j = 0
        while j < active_size:
            k = index[j]
            g = _gradient(indptr, indices, data, k, w, gamma * s, r)
            if not math.isfinite(g):
                diverged = True
                break
            a = alpha[k]
            pg = 0.0
            if a == 0.0:
                if shrinking and g > pg_max_old:
                    active_size -= 1
                    index[j] = index[active_size]
                    index[active_size] = k
                    continue
                if g < 0.0:
                    pg = g
            elif a == C:
                if shrinking and g < pg_min_old:
                    active_size -= 1
                    index[j] = index[active_size]
                    index[active_size] = k
                    continue
                if g > 0.0:
                    pg = g
            else:
                pg = g
            if pg > pg_max_new:
                pg_max_new = pg
            if pg < pg_min_new:
                pg_min_new = pg
            if pg != 0.0:
                new = min(max(a - g / qd[k], 0.0), C)
                d = new - a
                if d != 0.0:
                    alpha[k] = new
                    s += d
                    for p in range(indptr[k], indptr[k + 1]):
                        w[indices[p]] += d * data[p]
                    if check:
                        if new < 0.0 or new > C:
                            box_bad += 1
                        f_new = _objective_fresh(indptr, indices, data, alpha, r, gamma, scratch)
                        if f_new - f_prev > max_increase:
                            max_increase = f_new - f_prev
                        f_prev = f_new
            j += 1
        if diverged:
            status = 2
            break
        if sweep % RECOMPUTE_EVERY == 0:
            s = _rebuild(indptr, indices, data, alpha, w)

        if pg_max_new - pg_min_new <= eps:
            if active_size == n_active:
                # certify on the full set at the current point before stopping
                worst = 0.0
                for jj in range(n_active):
                    k = index[jj]
                    g = _gradient(indptr, indices, data, k, w, gamma * s, r)
                    a = alpha[k]
                    if a == 0.0:
                        pg = min(g, 0.0)
                    elif a == C:
                        pg = max(g, 0.0)
                    else:
                        pg = g
                    if abs(pg) > worst:
                        worst = abs(pg)
                if worst <= eps:
                    status = 0
                    break
            active_size = n_active
            pg_max_old = np.inf
            pg_min_old = -np.inf
            continue
        pg_max_old = pg_max_new if pg_max_new > 0.0 else np.inf
        pg_min_old = pg_min_new if pg_min_new < 0.0 else -np.inf

    s = _rebuild(indptr, indices, data, alpha, w)
    return sweep, status, s, max_increase, box_bad


# -- public API -----------------------------------------------------------------------

def _check_inputs(dataset: SparseDataset, r: RelevanceVector):
    if dataset.norm_state is NormState.RAW:
        raise StateError("mmfs_dcd needs normalized data")
    if len(r) != dataset.n_features:
        raise ShapeError(f"relevance has {len(r)} entries for {dataset.n_features} features")


def excluded_mask(dataset: SparseDataset, relevance) -> np.ndarray:
    """Features pinned at alpha = 0: flagged by the relevance, constant, or never stored."""
    return as_relevance(relevance).excluded | ~dataset.selectable_mask()


def projected_gradient(dataset: SparseDataset, alpha, w, s, r, gamma, C):
    """Gradient and projected gradient for every feature at (alpha, w, s)."""
    r = as_relevance(r)
    g = gamma * s - r.values
    g[dataset.feature_ids] += dataset.to_csc().T @ w
    pg = np.where(alpha <= 0.0, np.minimum(g, 0.0), np.where(alpha >= C, np.maximum(g, 0.0), g))
    pg[excluded_mask(dataset, r)] = 0.0
    return g, pg


def mmfs_dcd(dataset: SparseDataset, relevance, config: SolverConfig = SolverConfig(),
             check: bool = False, alpha0=None) -> DualSolution:
    """Solve the box-constrained dual by randomized coordinate descent with shrinking.

    ``relevance`` must already carry the theta scaling. Features flagged
    ``excluded`` keep alpha = 0. With ``check=True`` every update is followed by
    a from-scratch objective evaluation (slow; for verification).
    """
    r = as_relevance(relevance)
    _check_inputs(dataset, r)
    if not 0.0 < config.theta < 1.0:
        raise DomainError("the dcd path needs theta in (0, 1)")
    slots = dataset.feature_ids
    r_slot = np.ascontiguousarray(r.values[slots])
    movable = ~excluded_mask(dataset, r)[slots]
    active = np.flatnonzero(movable).astype(np.int64)
    alpha_slot = np.zeros(slots.size)
    if alpha0 is not None:
        alpha_slot[:] = np.clip(np.asarray(alpha0, dtype=np.float64)[slots], 0.0, config.C)
        alpha_slot[~movable] = 0.0
    w = np.zeros(dataset.n_instances)
    sweeps, code, s, max_inc, box_bad = _dcd_kernel(
        dataset.indptr, dataset.indices, dataset.data, r_slot, active,
        float(config.C), float(config.gamma), float(config.eps), int(config.max_sweeps),
        bool(config.shrinking), int(config.rng_seed) & 0xFFFFFFFFFFFFFFFF, bool(check),
        alpha_slot, w)

    alpha = np.zeros(dataset.n_features)
    alpha[slots] = alpha_slot
    _, pg = projected_gradient(dataset, alpha, w, s, r, config.gamma, config.C)
    status = STATUS[code]
    b = config.gamma * s
    dual = dual_objective(alpha, dataset, r, config.gamma, w=w)
    primal = primal_objective(w, b, dataset, r, config)
    return DualSolution(
        alpha=alpha, w=w, b=b, dual_objective=dual, primal_objective=primal,
        sweeps_used=int(sweeps), max_pg_violation=float(np.abs(pg).max(initial=0.0)),
        status=status, sum_alpha=float(s), config=dict(asdict(config), solver="dcd"),
        max_objective_increase=float(max_inc) if check else None,
        box_violations=int(box_bad) if check else None)


def dual_objective(alpha, dataset: SparseDataset, relevance, gamma: float, w=None) -> float:
    """1/2 ||w||^2 + gamma/2 (sum alpha)^2 - r' alpha with w = sum alpha_i f_i."""
    r = as_relevance(relevance)
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (dataset.n_features,):
        raise ShapeError(f"alpha must have length {dataset.n_features}")
    if w is None:
        w = dataset.to_csc() @ alpha[dataset.feature_ids]
    s = alpha.sum()
    return float(0.5 * (w @ w) + 0.5 * gamma * s * s - r.values @ alpha)


def primal_objective(w, b: float, dataset: SparseDataset, relevance, config: SolverConfig) -> float:
    """1/2 ||w||^2 + b^2/(2 gamma) + C * sum_i max(r_i - (f_i . w + b), 0) over selectable features."""
    r = as_relevance(relevance)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (dataset.n_instances,):
        raise ShapeError(f"w must have length {dataset.n_instances}")
    margins = np.full(dataset.n_features, b)
    margins[dataset.feature_ids] += dataset.to_csc().T @ w
    hinge = np.maximum(r.values - margins, 0.0)
    hinge[excluded_mask(dataset, r)] = 0.0
    return float(0.5 * (w @ w) + b * b / (2.0 * config.gamma) + config.C * hinge.sum())
