import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from instances import dense_gram, random_dataset, random_problem
from oracles import box_objective, box_qp_oracle, project_breakpoints, simplex_qp_enumerate
from mmfs.dataset import SparseDataset, normalize
from mmfs.errors import ConfigError, DomainError, InfeasibleError, ShapeError, StateError
from mmfs.metrics import RelevanceVector, correlation_relevance
from mmfs.solvers import (SolverConfig, box_qp_solve, constrained_qp_solve, dual_objective,
                          hard_margin_dual, lambda_max, mmfs_dcd, primal_objective,
                          project_box_simplex)

seeds = st.integers(0, 2**32 - 1)


def _single_column(m=9, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((m, 1))
    data, _ = normalize(SparseDataset.from_dense(X, np.where(np.arange(m) % 2 == 0, 1.0, -1.0)))
    return data


# -- coordinate descent ---------------------------------------------------------------------------

def test_single_feature_closed_form():
    data = _single_column()
    sol = mmfs_dcd(data, RelevanceVector.of([1.0]), SolverConfig(eps=1e-12))
    assert abs(sol.alpha[0] - 0.5) <= 1e-12
    assert abs(sol.dual_objective + 0.25) <= 1e-12
    assert abs(dual_objective([0.5], data, [1.0], 1.0) + 0.25) <= 1e-12
    # strong duality at the optimum
    assert abs(sol.primal_objective - (-sol.dual_objective)) <= 1e-6


@settings(max_examples=30, deadline=None)
@given(seeds, st.floats(0.05, 5), st.floats(0.05, 2), st.floats(0.01, 3))
def test_duplicated_feature_matches_reduced_problem(seed, gamma, C, r):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(12)
    data, _ = normalize(SparseDataset.from_dense(np.column_stack([x, x]),
                                                 np.where(np.arange(12) < 6, 1.0, -1.0)))
    sol = mmfs_dcd(data, RelevanceVector.of([r, r]), SolverConfig(C=C, gamma=gamma, eps=1e-12))
    # the pair behaves like one variable t = a1 + a2 with bound 2C
    t = min(max(r / (1 + gamma), 0), 2 * C)
    reduced = 0.5 * (1 + gamma) * t * t - r * t
    assert abs(sol.dual_objective - reduced) <= 1e-8
    assert abs(sol.alpha.sum() - t) <= 1e-8


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_dcd_matches_oracle(seed):
    data, r, C, gamma = random_problem(seed)
    sol = mmfs_dcd(data, r, SolverConfig(C=C, gamma=gamma, eps=1e-6))
    _, ref = box_qp_oracle(dense_gram(data), r.values, gamma, C)
    assert abs(sol.dual_objective - ref) <= 1e-6 * max(abs(ref), 1e-12)


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_solution_invariants(seed):
    data, r, C, gamma = random_problem(seed)
    cfg = SolverConfig(C=C, gamma=gamma, eps=1e-6)
    sol = mmfs_dcd(data, r, cfg)
    F = data.to_dense()
    assert sol.status == "converged"
    assert np.all(sol.alpha >= 0) and np.all(sol.alpha <= C)
    assert np.abs(sol.w - F @ sol.alpha).max() <= 1e-8
    assert sol.b == gamma * sol.sum_alpha
    assert sol.max_pg_violation <= cfg.eps
    Q = F.T @ F
    assert abs(sol.dual_objective - box_objective(sol.alpha, Q, r.values, gamma)) <= 1e-10


def test_dual_objective_dense_agreement_and_shape():
    rng = np.random.default_rng(1)
    raw, _, _ = random_dataset(rng, 15, 20)
    data, _ = normalize(raw)
    r = correlation_relevance(data)
    Q = dense_gram(data)
    assert dual_objective(np.zeros(20), data, r, 1.0) == 0.0
    for _ in range(5):
        a = rng.random(20)
        assert abs(dual_objective(a, data, r, 0.7) - box_objective(a, Q, r.values, 0.7)) <= 1e-10
    with pytest.raises(ShapeError):
        dual_objective(np.zeros(19), data, r, 1.0)


def test_primal_at_origin_is_full_hinge():
    data, r, C, gamma = random_problem(2)
    cfg = SolverConfig(C=C, gamma=gamma)
    value = primal_objective(np.zeros(data.n_instances), 0.0, data, r, cfg)
    assert abs(value - C * r.values.sum()) <= 1e-12
    with pytest.raises(ShapeError):
        primal_objective(np.zeros(data.n_instances + 1), 0.0, data, r, cfg)


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_weak_duality_at_random_points(seed):
    data, r, C, gamma = random_problem(seed)
    rng = np.random.default_rng(seed)
    Q = dense_gram(data)
    cfg = SolverConfig(C=C, gamma=gamma)
    a = C * rng.random(data.n_features)
    dual_value = -box_objective(a, Q, r.values, gamma)
    w = rng.standard_normal(data.n_instances) * rng.random()
    b = rng.standard_normal()
    assert primal_objective(w, b, data, r, cfg) >= dual_value - 1e-12


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_shrinking_does_not_change_the_answer(seed):
    data, r, C, gamma = random_problem(seed)
    on = mmfs_dcd(data, r, SolverConfig(C=C, gamma=gamma, eps=1e-9, rng_seed=3))
    off = mmfs_dcd(data, r, SolverConfig(C=C, gamma=gamma, eps=1e-9, rng_seed=3, shrinking=False))
    assert abs(on.dual_objective - off.dual_objective) <= 1e-8


def test_identical_seed_is_bitwise_reproducible():
    data, r, C, gamma = random_problem(4, (50, 80), (100, 200))
    cfg = SolverConfig(C=C, gamma=gamma, eps=1e-5, rng_seed=17)
    a, b = mmfs_dcd(data, r, cfg), mmfs_dcd(data, r, cfg)
    assert np.array_equal(a.alpha, b.alpha) and np.array_equal(a.w, b.w)
    assert a.sweeps_used == b.sweeps_used
    # a truncated run is a prefix of the same trajectory
    c = mmfs_dcd(data, r, SolverConfig(C=C, gamma=gamma, eps=1e-5, rng_seed=17, max_sweeps=2))
    d = mmfs_dcd(data, r, SolverConfig(C=C, gamma=gamma, eps=1e-5, rng_seed=17, max_sweeps=2))
    assert np.array_equal(c.alpha, d.alpha)


@settings(max_examples=20, deadline=None)
@given(seeds, st.floats(0.01, 5), st.floats(1.01, 10))
def test_sum_alpha_monotone_in_gamma(seed, g1, factor):
    data, r, C, _ = random_problem(seed)
    s1 = mmfs_dcd(data, r, SolverConfig(C=C, gamma=g1, eps=1e-9)).sum_alpha
    s2 = mmfs_dcd(data, r, SolverConfig(C=C, gamma=g1 * factor, eps=1e-9)).sum_alpha
    assert s2 <= s1 + 1e-8


def test_check_mode_reports_descent():
    data, r, C, gamma = random_problem(5)
    sol = mmfs_dcd(data, r, SolverConfig(C=C, gamma=gamma, eps=1e-8), check=True)
    assert sol.max_objective_increase <= 1e-12 and sol.box_violations == 0


def test_statuses_and_errors():
    data, r, C, gamma = random_problem(6, (20, 30), (40, 50))
    short = mmfs_dcd(data, r, SolverConfig(C=C, gamma=gamma, eps=1e-12, max_sweeps=1))
    assert short.status == "max_sweeps" and short.sweeps_used == 1
    bad = RelevanceVector.of(np.full(data.n_features, np.nan))
    assert mmfs_dcd(data, bad, SolverConfig()).status == "diverged"
    raw = SparseDataset.from_dense(np.eye(3), [1, -1, 1])
    with pytest.raises(StateError):
        mmfs_dcd(raw, RelevanceVector.of([1, 1, 1]))
    with pytest.raises(ShapeError):
        mmfs_dcd(data, RelevanceVector.of(np.ones(data.n_features + 1)))


@pytest.mark.parametrize("field, value", [("C", 0), ("gamma", -1), ("eps", 0),
                                          ("theta", 1.5), ("max_sweeps", 0)])
def test_config_validation(field, value):
    with pytest.raises((ConfigError, DomainError)):
        SolverConfig(**{field: value})


def test_excluded_features_stay_at_zero():
    X = np.array([[1.0, 3.0, 2.0], [1.0, -1.0, 0.5], [1.0, 2.0, -1.0], [1.0, 0.0, 0.1]])
    data, _ = normalize(SparseDataset.from_dense(X, [1, -1, 1, -1]), "unit_norm")
    r = correlation_relevance(data)
    sol = mmfs_dcd(data, r, SolverConfig(eps=1e-9))
    assert sol.alpha[0] == 0.0


def test_solution_json():
    data = _single_column()
    sol = mmfs_dcd(data, RelevanceVector.of([1.0]), SolverConfig(eps=1e-12))
    doc = json.loads(sol.dumps(include_w=True))
    assert doc["alpha"] == {"0": sol.alpha[0]}
    assert doc["status"] == "converged" and len(doc["w"]) == data.n_instances
    assert doc["config"]["C"] == 1.0


# -- simplex-box path ------------------------------------------------------------------------------

def test_constrained_examples():
    sol = constrained_qp_solve(np.eye(2), np.zeros(2), theta=0.0)
    np.testing.assert_allclose(sol.alpha, [0.5, 0.5], atol=1e-12)
    lp = constrained_qp_solve(np.eye(3), np.array([0.2, 0.9, 0.4]), theta=1.0, C=1.0)
    assert lp.alpha.tolist() == [0.0, 1.0, 0.0]
    tie = constrained_qp_solve(np.eye(3), np.array([0.9, 0.9, 0.4]), theta=1.0, C=1.0)
    assert tie.alpha.tolist() == [0.5, 0.5, 0.0]
    capped = constrained_qp_solve(np.eye(3), np.array([0.2, 0.9, 0.4]), theta=1.0, C=0.4)
    np.testing.assert_allclose(capped.alpha, [0.2, 0.4, 0.4], atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(seeds, st.floats(0.0, 0.95), st.sampled_from([1.0, 0.4, 0.25]))
def test_constrained_matches_enumeration(seed, theta, C):
    rng = np.random.default_rng(seed)
    F = rng.standard_normal((8, 6))
    Q = F.T @ F / 8
    r = rng.random(6)
    sol = constrained_qp_solve(Q, r, theta, C, tol=1e-12)
    _, ref = simplex_qp_enumerate(Q, theta * r, 1 - theta, C)
    assert abs(sol.dual_objective - ref) <= 1e-8
    assert abs(sol.alpha.sum() - 1) <= 1e-9
    assert np.all(sol.alpha >= 0) and np.all(sol.alpha <= C + 1e-15)


def test_constrained_multiplier_satisfies_stationarity():
    rng = np.random.default_rng(9)
    F = rng.standard_normal((10, 8))
    Q = F.T @ F / 10
    r = rng.random(8)
    sol = constrained_qp_solve(Q, r, 0.5, C=1.0, tol=1e-12)
    grad = 0.5 * Q @ sol.alpha - 0.5 * r
    free = (sol.alpha > 1e-9) & (sol.alpha < 1 - 1e-9)
    assert free.any()
    assert np.abs(grad[free] + sol.b).max() <= 1e-7
    assert np.all(grad[sol.alpha <= 1e-9] + sol.b >= -1e-7)


def test_constrained_errors():
    with pytest.raises(InfeasibleError):
        constrained_qp_solve(np.eye(4), np.ones(4), 0.5, C=0.2)
    with pytest.raises(ShapeError):
        constrained_qp_solve(np.array([[1.0, 0.5], [0.0, 1.0]]), np.ones(2), 0.5)
    with pytest.raises(DomainError):
        constrained_qp_solve(np.eye(2), np.ones(2), 1.5)


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_hard_margin_dual_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    F = rng.standard_normal((7, 5))
    Q = F.T @ F / 7
    r = rng.random(5) * 3
    sol = hard_margin_dual(Q, r, C=1.0, tol=1e-12)
    _, ref = simplex_qp_enumerate(Q, r, 1.0, 1.0)
    assert abs(sol.dual_objective - ref) <= 1e-8


# -- projection -------------------------------------------------------------------------------------

def test_projection_examples():
    v = np.array([0.2, 0.3, 0.5])
    np.testing.assert_allclose(project_box_simplex(v, 1.0), v, atol=1e-12)
    assert project_box_simplex(np.array([10.0, 0.0]), 1.0).tolist() == [1.0, 0.0]
    with pytest.raises(InfeasibleError):
        project_box_simplex(np.zeros(3), 0.3)


@settings(max_examples=60, deadline=None)
@given(seeds, st.integers(4, 12), st.floats(0.09, 2.0))
def test_projection_matches_breakpoint_oracle(seed, n, C):
    if C * n < 1:
        C = 1.0 / n + 0.01
    v = np.random.default_rng(seed).standard_normal(n) * 2
    p = project_box_simplex(v, C)
    np.testing.assert_allclose(p, project_breakpoints(v, C), atol=1e-9)
    assert abs(p.sum() - 1) <= 1e-12
    # projecting twice changes nothing
    np.testing.assert_allclose(project_box_simplex(p, C), p, atol=1e-12)


def test_projection_n12_c03():
    v = np.random.default_rng(12).standard_normal(12)
    np.testing.assert_allclose(project_box_simplex(v, 0.3), project_breakpoints(v, 0.3), atol=1e-9)


# -- dense box reference and helpers -------------------------------------------------------------

@settings(max_examples=20, deadline=None)
@given(seeds)
def test_box_qp_solve_matches_oracle(seed):
    data, r, C, gamma = random_problem(seed)
    Q = dense_gram(data)
    sol = box_qp_solve(Q, r.values, gamma, C)
    _, ref = box_qp_oracle(Q, r.values, gamma, C)
    assert sol.status == "converged"
    assert abs(sol.dual_objective - ref) <= 1e-8 * max(1.0, abs(ref))
    assert sol.b == gamma * sol.sum_alpha


def test_box_qp_without_momentum_on_well_conditioned_problem():
    rng = np.random.default_rng(13)
    F = rng.standard_normal((40, 10))
    Q = F.T @ F / 40 + np.eye(10)
    r = rng.random(10)
    plain = box_qp_solve(Q, r, 0.5, 0.3, accelerate=False)
    _, ref = box_qp_oracle(Q, r, 0.5, 0.3)
    assert plain.status == "converged"
    assert abs(plain.dual_objective - ref) <= 1e-10


@settings(max_examples=20, deadline=None)
@given(seeds, st.integers(2, 30))
def test_lambda_max(seed, n):
    F = np.random.default_rng(seed).standard_normal((n + 3, n))
    Q = F.T @ F
    top = np.linalg.eigvalsh(Q)[-1]
    est = lambda_max(lambda x: Q @ x, n, max_iters=2000, rtol=1e-14)
    # power iteration approaches from below
    assert est <= top * (1 + 1e-12)
    assert est >= 0.9 * top
