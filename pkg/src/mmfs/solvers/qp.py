"""Dense projected-gradient solvers.

``constrained_qp_solve`` handles the simplex-box dual (and hence QPFS);
``box_qp_solve`` is a dense reference solver for the same box problem that the
coordinate descent path attacks without forming Q.
"""

from __future__ import annotations

import numpy as np

from ..errors import DomainError, InfeasibleError, ShapeError
from .dcd import DualSolution


def lambda_max(matvec, n: int, min_iters: int = 30, max_iters: int = 200,
               rtol: float = 1e-10, seed: int = 0) -> float:
    """Largest eigenvalue of a symmetric PSD operator by power iteration."""
    v = np.random.default_rng(seed).uniform(0.5, 1.5, size=n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for it in range(max_iters):
        u = matvec(v)
        new = float(v @ u)
        norm = np.linalg.norm(u)
        if norm == 0:
            return 0.0
        v = u / norm
        if it + 1 >= min_iters and abs(new - lam) <= rtol * abs(new):
            lam = new
            break
        lam = new
    return lam


def project_box_simplex(v, C: float) -> np.ndarray:
    """Euclidean projection onto {0 <= a <= C, sum(a) = 1}.

    Bisection on the shift tau in a = clip(v - tau, 0, C), finished by an exact
    solve for tau on the free set it identifies.
    """
    v = np.asarray(v, dtype=np.float64)
    n = v.size
    if n == 0 or C * n < 1.0 - 1e-12:
        raise InfeasibleError(f"box bound C={C} cannot reach unit sum with {n} entries")
    lo, hi = float(v.min()) - C, float(v.max())
    tau = 0.5 * (lo + hi)
    for _ in range(200):
        tau = 0.5 * (lo + hi)
        total = np.clip(v - tau, 0.0, C).sum()
        if abs(total - 1.0) <= 1e-12:
            break
        if total > 1.0:
            lo = tau
        else:
            hi = tau
    a = np.clip(v - tau, 0.0, C)
    shifted = v - tau
    free = (shifted > 0) & (shifted < C)
    if free.any():
        exact = (v[free].sum() + C * np.count_nonzero(shifted >= C) - 1.0) / np.count_nonzero(free)
        b = np.clip(v - exact, 0.0, C)
        if abs(b.sum() - 1.0) <= abs(a.sum() - 1.0):
            a = b
    return a


def _check_square_symmetric(Q):
    Q = np.asarray(Q, dtype=np.float64)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise ShapeError("Q must be square")
    scale = max(1.0, float(np.abs(Q).max(initial=0.0)))
    if np.abs(Q - Q.T).max(initial=0.0) > 1e-10 * scale:
        raise ShapeError("Q must be symmetric")
    return Q


def _greedy_linear(c, C):
    """argmin -c'a over the simplex-box: fill by descending c, ties shared equally."""
    a = np.zeros(c.size)
    remaining = 1.0
    for value in np.unique(c)[::-1]:
        group = np.flatnonzero(c == value)
        amount = min(remaining, group.size * C)
        a[group] = amount / group.size
        remaining -= amount
        if remaining <= 0:
            break
    return a


def _multiplier(grad, a, C):
    """Lagrange multiplier b of sum(a) = 1, from -grad on the free coordinates."""
    free = (a > 1e-12) & (a < C - 1e-12)
    if free.any():
        return float(-grad[free].mean())
    # all at bounds: any b in the KKT interval works; take its midpoint
    upper = -grad[a >= C - 1e-12]
    lower = -grad[a <= 1e-12]
    lo = upper.max() if upper.size else -np.inf
    hi = lower.min() if lower.size else np.inf
    if np.isfinite(lo) and np.isfinite(hi):
        return float(0.5 * (lo + hi))
    return float(lo if np.isfinite(lo) else hi)


def _simplex_qp(Q, c, quad, C, tol, max_iter, seed):
    """min 1/2 quad a'Qa - c'a over the simplex-box by projected gradient, step 1/L."""
    n = c.size
    if C * n < 1.0 - 1e-12:
        raise InfeasibleError(f"C={C} < 1/N={1.0 / n}: the constraint set is empty")
    L = quad * lambda_max(lambda x: Q @ x, n, seed=seed) if quad > 0 else 0.0
    if L <= 0.0:
        a = _greedy_linear(c, C)
        grad = -c
        return a, grad, 0, "converged"
    a = np.full(n, 1.0 / n)
    status = "max_sweeps"
    it = 0
    grad = quad * (Q @ a) - c
    for it in range(1, max_iter + 1):
        nxt = project_box_simplex(a - grad / L, C)
        step = np.abs(nxt - a).max()
        a = nxt
        grad = quad * (Q @ a) - c
        if step <= tol:
            status = "converged"
            break
        if it % 50 == 0 and np.abs(a - project_box_simplex(a - grad, C)).max() <= tol:
            status = "converged"
            break
    return a, grad, it, status


def constrained_qp_solve(Q, r, theta: float, C: float = 1.0, tol: float = 1e-10,
                         max_iter: int = 200_000, seed: int = 0) -> DualSolution:
    """Minimize 1/2 (1-theta) a'Qa - theta r'a subject to 0 <= a <= C, sum(a) = 1.

    With C >= 1 this is exactly QPFS. theta = 1 is solved as a linear program.
    The multiplier of the equality constraint is reported as ``b``.
    """
    Q = _check_square_symmetric(Q)
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (Q.shape[0],):
        raise ShapeError("r must match the order of Q")
    if not 0.0 <= theta <= 1.0:
        raise DomainError("theta must lie in [0, 1]")
    a, grad, iters, status = _simplex_qp(Q, theta * r, 1.0 - theta, C, tol, max_iter, seed)
    return _simplex_solution(Q, a, grad, 1.0 - theta, theta * r, C, iters, status,
                             dict(solver="qp", theta=theta, C=C, tol=tol))


def hard_margin_dual(Q, r, C: float = 1.0, tol: float = 1e-10, max_iter: int = 200_000,
                     seed: int = 0) -> DualSolution:
    """Minimize 1/2 a'Qa - r'a subject to 0 <= a <= C, sum(a) = 1 (theta-free form)."""
    Q = _check_square_symmetric(Q)
    r = np.asarray(r, dtype=np.float64)
    a, grad, iters, status = _simplex_qp(Q, r, 1.0, C, tol, max_iter, seed)
    return _simplex_solution(Q, a, grad, 1.0, r, C, iters, status,
                             dict(solver="qp-hard-margin", C=C, tol=tol))


def _simplex_solution(Q, a, grad, quad, c, C, iters, status, config):
    residual = float(np.abs(a - project_box_simplex(a - grad, C)).max())
    return DualSolution(
        alpha=a, w=None, b=_multiplier(grad, a, C),
        dual_objective=float(0.5 * quad * (a @ Q @ a) - c @ a), primal_objective=None,
        sweeps_used=int(iters), max_pg_violation=residual, status=status,
        sum_alpha=float(a.sum()), config=config)


def box_qp_solve(Q, r, gamma: float, C: float, tol: float = 1e-10, max_iter: int = 100_000,
                 accelerate: bool = True, seed: int = 0) -> DualSolution:
    """Dense solver for min 1/2 a'Qa + gamma/2 (sum a)^2 - r'a over 0 <= a <= C.

    Projected gradient with step 1/L on the clipped box, optionally with
    Nesterov momentum and gradient-based restarts. Stops when the projected
    gradient residual ||a - clip(a - grad, 0, C)||_inf drops to ``tol``.
    """
    Q = _check_square_symmetric(Q)
    r = np.asarray(r, dtype=np.float64)
    n = r.size

    def hess(x):
        return Q @ x + gamma * x.sum()

    L = lambda_max(hess, n, seed=seed)
    a = np.zeros(n)
    y = a.copy()
    t = 1.0
    status = "max_sweeps"
    it = 0
    for it in range(1, max_iter + 1):
        grad_y = hess(y) - r
        nxt = np.clip(y - grad_y / L, 0.0, C)
        if accelerate:
            if (y - nxt) @ (nxt - a) > 0:
                t = 1.0
                y_next = nxt
            else:
                t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
                y_next = nxt + ((t - 1.0) / t_next) * (nxt - a)
                t = t_next
        else:
            y_next = nxt
        a, y = nxt, y_next
        if it % 10 == 0:
            grad = hess(a) - r
            if np.abs(a - np.clip(a - grad, 0.0, C)).max() <= tol:
                status = "converged"
                break
    grad = hess(a) - r
    s = a.sum()
    return DualSolution(
        alpha=a, w=None, b=gamma * s,
        dual_objective=float(0.5 * (a @ Q @ a) + 0.5 * gamma * s * s - r @ a),
        primal_objective=None, sweeps_used=it,
        max_pg_violation=float(np.abs(a - np.clip(a - grad, 0.0, C)).max()),
        status=status, sum_alpha=float(s),
        config=dict(solver="box-pg", gamma=gamma, C=C, tol=tol, accelerate=accelerate))
