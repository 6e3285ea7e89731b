"""
Momentum-accelerated OFO controller.

One call to :func:`controller_step` is one closed-loop iteration: evaluate the
cost gradient at the measured outputs, mix it with the previous gradient,
project through the QP and move the inputs by ``alpha`` times the projected
direction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .qp import (
    INFEASIBLE,
    OPTIMAL,
    CompositeGradient,
    ConstraintSpec,
    ParameterError,
    build_projection_qp,
    reduced_gradient,
    soften_outputs,
    solve_qp,
)

CONGESTION = "congestion"
TRACKING = "tracking"

RECOMPUTE = "recompute_each_step"
FROZEN = "frozen"

# Outputs count as violated only beyond this margin [pu]
VIOLATION_TOL = 1e-5


class QpFailure(RuntimeError):
    """The projection QP stayed infeasible even with softened output rows."""


@dataclass(frozen=True)
class ObjectiveSpec:
    """Quadratic cost of either case study.

    ``congestion``: (p - p_nominal)^T A (p - p_nominal) + q^T B q
    ``tracking``:   (p_set - p_pcc)^2 + (q_set - q_pcc)^2
    """

    kind: str
    A: Optional[np.ndarray] = None
    B: Optional[np.ndarray] = None
    p_nominal: Optional[np.ndarray] = None
    p_set: float = 0.0
    q_set: float = 0.0
    pcc_rows: tuple[int, int] = (-2, -1)

    def __post_init__(self) -> None:
        if self.kind == CONGESTION:
            if self.A is None or self.B is None or self.p_nominal is None:
                raise ValueError("congestion objective needs A, B and p_nominal")
            for name in ("A", "B"):
                M = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
                if not np.allclose(M, M.T):
                    raise ValueError(f"weight matrix {name} must be symmetric")
                if np.linalg.eigvalsh(M).min() < -1e-12:
                    raise ValueError(f"weight matrix {name} must be positive semidefinite")
                object.__setattr__(self, name, M)
            object.__setattr__(self, "p_nominal", np.asarray(self.p_nominal, dtype=float))
        elif self.kind != TRACKING:
            raise ValueError(f"unknown objective kind {self.kind!r}")

    @classmethod
    def congestion(cls, p_nominal, a_weight: float = 1.0, b_weight: float = 0.1):
        n = len(p_nominal)
        return cls(
            kind=CONGESTION,
            A=a_weight * np.eye(n),
            B=b_weight * np.eye(n),
            p_nominal=np.asarray(p_nominal, dtype=float),
        )

    @classmethod
    def tracking(cls, p_set: float, q_set: float, pcc_rows=(-2, -1)):
        return cls(kind=TRACKING, p_set=float(p_set), q_set=float(q_set), pcc_rows=tuple(pcc_rows))

    def value(self, u: np.ndarray, y: np.ndarray) -> float:
        if self.kind == CONGESTION:
            n = self.p_nominal.size
            dp = u[:n] - self.p_nominal
            q = u[n:]
            return float(dp @ self.A @ dp + q @ self.B @ q)
        ip, iq = self.pcc_rows
        return float((self.p_set - y[ip]) ** 2 + (self.q_set - y[iq]) ** 2)

    def with_setpoint(self, p_set: float, q_set: float) -> "ObjectiveSpec":
        return replace(self, p_set=float(p_set), q_set=float(q_set))


def evaluate_gradient(objective: ObjectiveSpec, u: np.ndarray, y: np.ndarray) -> CompositeGradient:
    """Partial derivatives of the cost with respect to inputs and outputs."""
    u = np.asarray(u, dtype=float)
    y = np.asarray(y, dtype=float)
    if objective.kind == CONGESTION:
        n = objective.p_nominal.size
        if u.size != 2 * n:
            raise ValueError(f"input vector has {u.size} entries, expected {2 * n}")
        gp = 2.0 * objective.A @ (u[:n] - objective.p_nominal)
        gq = 2.0 * objective.B @ u[n:]
        return CompositeGradient(u=np.concatenate([gp, gq]), y=np.zeros(y.size))
    gy = np.zeros(y.size)
    ip, iq = objective.pcc_rows
    gy[ip] = 2.0 * (y[ip] - objective.p_set)
    gy[iq] = 2.0 * (y[iq] - objective.q_set)
    return CompositeGradient(u=np.zeros(u.size), y=gy)


def momentum_combine(current: np.ndarray, previous: Optional[np.ndarray], beta: float) -> np.ndarray:
    """``beta * current + (1 - beta) * previous``; ``current`` when there is no history."""
    if not 0.0 < beta <= 1.0:
        raise ParameterError(f"beta must lie in (0, 1], got {beta}")
    if previous is None:
        return current
    return beta * current + (1.0 - beta) * previous


@dataclass(frozen=True)
class ControllerConfig:
    alpha: float
    beta: float
    objective: ObjectiveSpec
    limits: ConstraintSpec
    G: Optional[np.ndarray] = None
    sensitivity_policy: str = RECOMPUTE
    use_momentum: bool = True
    # limits used for violation counting; defaults to ``limits``
    check_limits: Optional[ConstraintSpec] = None

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha <= 1.0:
            raise ParameterError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not 0.0 < self.beta <= 1.0:
            raise ParameterError(f"beta must lie in (0, 1], got {self.beta}")
        if self.sensitivity_policy not in (RECOMPUTE, FROZEN):
            raise ParameterError(f"unknown sensitivity policy {self.sensitivity_policy!r}")


@dataclass(frozen=True)
class ControllerState:
    u: np.ndarray
    prev_gradient: Optional[np.ndarray] = None
    k: int = 0


@dataclass(frozen=True)
class StepRecord:
    k: int
    u: np.ndarray
    y: np.ndarray
    phi: float
    gradient: np.ndarray
    sigma: np.ndarray
    u_next: np.ndarray
    qp_status: str
    softened: bool
    active: tuple[str, ...]
    kkt_residual: float
    # linearised post-step outputs y + alpha S sigma
    y_predicted: np.ndarray = field(repr=False)
    violations: int = 0

    @property
    def sigma_norm(self) -> float:
        return float(np.linalg.norm(self.sigma))


def count_violations(y: np.ndarray, limits: ConstraintSpec, tol: float = VIOLATION_TOL) -> int:
    return int(np.sum(y > limits.y_max + tol) + np.sum(y < limits.y_min - tol))


def controller_step(
    state: ControllerState,
    y: np.ndarray,
    sens,
    config: ControllerConfig,
    input_labels=None,
    output_labels=None,
) -> tuple[ControllerState, StepRecord]:
    """Run one OFO iteration from the measurement ``y`` taken at ``state.u``."""
    S = getattr(sens, "matrix", sens)
    if input_labels is None:
        input_labels = getattr(sens, "col_labels", None) or None
    if output_labels is None:
        output_labels = getattr(sens, "row_labels", None) or None
    u = state.u
    grad = evaluate_gradient(config.objective, u, y)
    g_now = reduced_gradient(grad, S)
    if config.use_momentum:
        g_mix = momentum_combine(g_now, state.prev_gradient, config.beta)
    else:
        g_mix = g_now
    problem = build_projection_qp(
        CompositeGradient(u=g_mix, y=np.zeros(y.size)),
        S,
        u,
        y,
        config.limits,
        config.alpha,
        config.G,
        input_labels=input_labels,
        output_labels=output_labels,
    )
    sol = solve_qp(problem)
    softened = False
    m = u.size
    if sol.status == INFEASIBLE:
        soft, _ = soften_outputs(problem)
        sol = solve_qp(soft)
        softened = True
        if sol.status == INFEASIBLE:
            raise QpFailure(f"projection QP infeasible at k={state.k} even after softening")
        active = tuple(soft.row_labels[i] for i in sol.active_set)
    else:
        active = tuple(problem.row_labels[i] for i in sol.active_set)
    sigma = sol.w[:m]
    u_next = u + config.alpha * sigma
    record = StepRecord(
        k=state.k,
        u=u,
        y=np.asarray(y, dtype=float),
        phi=config.objective.value(u, y),
        gradient=g_now,
        sigma=sigma,
        u_next=u_next,
        qp_status=sol.status if not softened else f"{sol.status}_softened",
        softened=softened,
        active=active,
        kkt_residual=sol.kkt_residual,
        y_predicted=y + config.alpha * (S @ sigma),
        violations=count_violations(y, config.check_limits or config.limits),
    )
    # the raw gradient is kept, not the mixed one
    return ControllerState(u=u_next, prev_gradient=g_now, k=state.k + 1), record
