"""
Dense convex QP used for the OFO projection step.

``solve_qp`` minimises ``(w + g)^T G (w + g)`` subject to ``A w <= b`` with the
dual active-set method of Goldfarb and Idnani: start at the unconstrained
minimiser ``w = -g`` and add the most violated constraint one at a time,
dropping active constraints whose multipliers would turn negative. The method
never needs a feasible starting point and reports infeasibility when a
violated constraint can be neither satisfied nor traded against an active one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max_iter"

FEAS_TOL = 1e-11
SOFT_PENALTY = 1e4


class ParameterError(ValueError):
    """A controller or projection parameter is outside its admissible range."""


@dataclass(frozen=True)
class QpProblem:
    G: np.ndarray
    gradient_term: np.ndarray
    ineq_A: np.ndarray
    ineq_b: np.ndarray
    row_labels: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        G = np.atleast_2d(np.asarray(self.G, dtype=float))
        g = np.asarray(self.gradient_term, dtype=float).reshape(-1)
        m = g.size
        A = np.asarray(self.ineq_A, dtype=float).reshape(-1, m)
        b = np.asarray(self.ineq_b, dtype=float).reshape(-1)
        if G.shape != (m, m):
            raise ValueError(f"G has shape {G.shape}, expected ({m}, {m})")
        if not np.allclose(G, G.T, rtol=0, atol=1e-12 * max(1.0, np.abs(G).max())):
            raise ValueError("G must be symmetric")
        if m and np.linalg.eigvalsh(G).min() <= 1e-10:
            raise ValueError("G must be positive definite")
        if A.shape[0] != b.size:
            raise ValueError(f"{A.shape[0]} constraint rows but {b.size} right-hand sides")
        if self.row_labels and len(self.row_labels) != b.size:
            raise ValueError("row label count does not match constraint rows")
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "gradient_term", g)
        object.__setattr__(self, "ineq_A", A)
        object.__setattr__(self, "ineq_b", b)

    @property
    def n_vars(self) -> int:
        return self.gradient_term.size

    @property
    def n_rows(self) -> int:
        return self.ineq_b.size

    def objective(self, w: np.ndarray) -> float:
        d = w + self.gradient_term
        return float(d @ self.G @ d)


@dataclass(frozen=True)
class QpSolution:
    w: np.ndarray
    active_set: tuple[int, ...]
    kkt_residual: float
    status: str
    multipliers: np.ndarray
    iterations: int = 0


def kkt_residuals(problem: QpProblem, w: np.ndarray, lam: np.ndarray) -> dict[str, float]:
    """Stationarity, primal/dual feasibility and complementarity residuals."""
    G, g, A, b = problem.G, problem.gradient_term, problem.ineq_A, problem.ineq_b
    # gradient of 1/2 (w+g)^T G (w+g): the objective is scaled by 1/2 here so the
    # multipliers match the textbook form
    stat = G @ (w + g) + A.T @ lam
    slack = A @ w - b
    return {
        "stationarity": float(np.max(np.abs(stat), initial=0.0)),
        "primal": float(np.max(slack, initial=0.0).clip(min=0.0)),
        "dual": float(np.max(-lam, initial=0.0).clip(min=0.0)),
        "complementarity": float(np.max(np.abs(lam * slack), initial=0.0)),
    }


def solve_qp(problem: QpProblem, max_iter: Optional[int] = None) -> QpSolution:
    """Solve ``min (w+g)^T G (w+g)  s.t.  A w <= b``.

    The returned ``multipliers`` belong to the half-scaled objective
    ``1/2 (w+g)^T G (w+g)``. Ties between equally violated rows go to the
    lowest row index.
    """
    G, g, A, b = problem.G, problem.gradient_term, problem.ineq_A, problem.ineq_b
    m, n_rows = problem.n_vars, problem.n_rows
    w = -g.copy()
    lam = np.zeros(n_rows)
    if n_rows == 0 or m == 0:
        status = OPTIMAL if n_rows == 0 or np.all(b >= -FEAS_TOL) else INFEASIBLE
        return _finish(problem, w, lam, [], status, 0)

    if max_iter is None:
        max_iter = 10 * (m + n_rows)
    chol = cho_factor(G)
    GiAT = cho_solve(chol, A.T)  # columns G^-1 a_i
    row_scale = np.maximum(1.0, np.linalg.norm(A, axis=1))

    active: list[int] = []
    it = 0
    while True:
        viol = (A @ w - b) / row_scale
        viol[active] = -np.inf
        p = int(np.argmax(viol))
        if viol[p] <= FEAS_TOL:
            return _finish(problem, w, lam, active, OPTIMAL, it)
        lam_p = 0.0
        while True:
            it += 1
            if it > max_iter:
                return _finish(problem, w, lam, active, MAX_ITER, it)
            a_p = A[p]
            Gi_ap = GiAT[:, p]
            if active:
                N = A[active].T
                GiN = GiAT[:, active]
                M = N.T @ GiN
                r = np.linalg.solve(M, N.T @ Gi_ap)
                z = Gi_ap - GiN @ r
            else:
                r = np.zeros(0)
                z = Gi_ap
            curv = float(a_p @ z)
            # primal step length to satisfy row p
            s_p = float(a_p @ w - b[p])
            if curv > 1e-12 * max(1.0, float(a_p @ Gi_ap)):
                t2 = s_p / curv
            else:
                t2 = np.inf
            # dual step length before an active multiplier hits zero
            t1, drop = np.inf, -1
            for j, rj in enumerate(r):
                if rj > 1e-12:
                    tj = lam[active[j]] / rj
                    if tj < t1:
                        t1, drop = tj, j
            t = min(t1, t2)
            if not np.isfinite(t):
                return _finish(problem, w, lam, active, INFEASIBLE, it)
            for j, rj in enumerate(r):
                lam[active[j]] -= t * rj
            lam_p += t
            if np.isfinite(t2):
                w = w - t * z
            if t2 <= t1:
                lam[p] = lam_p
                active.append(p)
                break
            lam[active[drop]] = 0.0
            active.pop(drop)


def _finish(problem, w, lam, active, status, it) -> QpSolution:
    lam = np.where(lam > 0, lam, 0.0)
    if status == OPTIMAL and active:
        w, lam = _polish(problem, active, w, lam)
    res = kkt_residuals(problem, w, lam)
    return QpSolution(
        w=w,
        active_set=tuple(sorted(active)),
        kkt_residual=max(res.values()),
        status=status,
        multipliers=lam,
        iterations=it,
    )


def _polish(problem: QpProblem, active, w, lam):
    """Re-solve the equality-constrained KKT system on the final active set."""
    G, g, A, b = problem.G, problem.gradient_term, problem.ineq_A, problem.ineq_b
    m = G.shape[0]
    N = A[active]
    k = len(active)
    K = np.block([[G, N.T], [N, np.zeros((k, k))]])
    rhs = np.concatenate([-G @ g, b[active]])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        return w, lam
    w2 = sol[:m]
    mu = sol[m:]
    if np.any(mu < -1e-12) or np.any(A @ w2 - b > 1e-10):
        return w, lam
    lam2 = np.zeros_like(lam)
    lam2[active] = np.maximum(mu, 0.0)
    return w2, lam2


# -- projection problem ------------------------------------------------------


@dataclass(frozen=True)
class ConstraintSpec:
    """Input box and output band; infinite entries are unconstrained."""

    u_min: np.ndarray
    u_max: np.ndarray
    y_min: np.ndarray
    y_max: np.ndarray

    def __post_init__(self) -> None:
        for name in ("u_min", "u_max", "y_min", "y_max"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.u_min.shape != self.u_max.shape or self.y_min.shape != self.y_max.shape:
            raise ValueError("bound vectors must pair up in shape")
        if np.any(self.u_min > self.u_max):
            raise ValueError("u_min exceeds u_max")

    def with_input_box(self, index: int, lo: float, hi: float) -> "ConstraintSpec":
        u_min, u_max = self.u_min.copy(), self.u_max.copy()
        u_min[index], u_max[index] = lo, hi
        return ConstraintSpec(u_min, u_max, self.y_min, self.y_max)


@dataclass(frozen=True)
class CompositeGradient:
    """Cost gradient split into its direct input part and its output part."""

    u: np.ndarray
    y: np.ndarray


def reduced_gradient(grad: CompositeGradient, sens: np.ndarray) -> np.ndarray:
    """Total derivative with respect to the inputs: ``grad_u + S^T grad_y``."""
    return grad.u + sens.T @ grad.y


def build_projection_qp(
    grad: CompositeGradient,
    sens,
    u: np.ndarray,
    y: np.ndarray,
    limits: ConstraintSpec,
    alpha: float,
    G: Optional[np.ndarray] = None,
    input_labels=None,
    output_labels=None,
) -> QpProblem:
    """Projection QP around the current operating point.

    Input rows encode ``u + alpha w`` inside the box, output rows encode the
    linearised ``y + alpha S w`` inside the band. Bounds that are infinite
    produce no row.
    """
    if not 0.0 < alpha <= 1.0:
        raise ParameterError(f"alpha must lie in (0, 1], got {alpha}")
    S = getattr(sens, "matrix", sens)
    u = np.asarray(u, dtype=float)
    y = np.asarray(y, dtype=float)
    m = u.size
    if S.shape != (y.size, m):
        raise ValueError(f"sensitivity shape {S.shape} does not match ({y.size}, {m})")
    if G is None:
        G = np.eye(m)
    gvec = reduced_gradient(grad, S)
    g_term = cho_solve(cho_factor(G), gvec) if m else gvec

    in_lab = input_labels or [f"u{i}" for i in range(m)]
    out_lab = output_labels or [f"y{i}" for i in range(y.size)]
    eye = np.eye(m)
    rows, rhs, labels = [], [], []

    def add(mask, mat, vec, names, tag):
        if np.any(mask):
            rows.append(mat[mask])
            rhs.append(vec[mask])
            labels.extend(f"{tag}:{names[i]}" for i in np.flatnonzero(mask))

    add(np.isfinite(limits.u_max), alpha * eye, limits.u_max - u, in_lab, "u_max")
    add(np.isfinite(limits.u_min), -alpha * eye, u - limits.u_min, in_lab, "u_min")
    add(np.isfinite(limits.y_max), alpha * S, limits.y_max - y, out_lab, "y_max")
    add(np.isfinite(limits.y_min), -alpha * S, y - limits.y_min, out_lab, "y_min")
    A = np.vstack(rows) if rows else np.zeros((0, m))
    b = np.concatenate(rhs) if rhs else np.zeros(0)
    return QpProblem(G=G, gradient_term=g_term, ineq_A=A, ineq_b=b, row_labels=tuple(labels))


def soften_outputs(problem: QpProblem, penalty: float = SOFT_PENALTY) -> tuple[QpProblem, int]:
    """Append one nonnegative slack per output row (``y_max``/``y_min`` rows),
    penalised quadratically. Returns the enlarged problem and the slack count."""
    out_rows = [i for i, lab in enumerate(problem.row_labels) if lab.startswith("y_")]
    k = len(out_rows)
    m = problem.n_vars
    G = np.zeros((m + k, m + k))
    G[:m, :m] = problem.G
    G[m:, m:] = penalty * np.eye(k)
    g = np.concatenate([problem.gradient_term, np.zeros(k)])
    A = np.zeros((problem.n_rows + k, m + k))
    A[: problem.n_rows, :m] = problem.ineq_A
    for j, i in enumerate(out_rows):
        A[i, m + j] = -1.0
    A[problem.n_rows :, m:] = -np.eye(k)
    b = np.concatenate([problem.ineq_b, np.zeros(k)])
    labels = problem.row_labels + tuple(f"slack:{j}" for j in range(k))
    return QpProblem(G=G, gradient_term=g, ineq_A=A, ineq_b=b, row_labels=labels), k
