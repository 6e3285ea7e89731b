"""
Newton-Raphson AC power flow and input-output sensitivities.

The solver uses the polar formulation with a dense Jacobian refactorised at
every iteration. ``compute_sensitivities`` reuses the converged Jacobian to
map actuator injections to the monitored outputs (bus voltage magnitudes,
branch apparent flows and the PCC exchange).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .grid import Network, build_admittance

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 30


class PowerFlowDivergence(RuntimeError):
    """Newton-Raphson did not reach the mismatch tolerance."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class IllConditionedOperatingPoint(RuntimeError):
    """The power-flow Jacobian is (numerically) singular at this point."""


@dataclass(frozen=True)
class _Compiled:
    Y: np.ndarray
    pq: np.ndarray
    slack: int
    v_slack: float
    f: np.ndarray
    t: np.ndarray
    yff: np.ndarray
    yft: np.ndarray
    act_bus: np.ndarray


def _compiled(network: Network) -> _Compiled:
    # cached on the (immutable) network instance
    cache = network.__dict__.get("_pf_compiled")
    if cache is None:
        adm = [br.admittances() for br in network.branches]
        cache = _Compiled(
            Y=build_admittance(network),
            pq=network.pq_buses,
            slack=network.slack,
            v_slack=network.buses[network.slack].v_nominal,
            f=np.array([br.from_bus for br in network.branches], dtype=int),
            t=np.array([br.to_bus for br in network.branches], dtype=int),
            yff=np.array([a[0] for a in adm], dtype=complex),
            yft=np.array([a[1] for a in adm], dtype=complex),
            act_bus=np.array([a.bus for a in network.actuators], dtype=int),
        )
        network.__dict__["_pf_compiled"] = cache
    return cache


@dataclass(frozen=True)
class PowerFlowSolution:
    v: np.ndarray
    branch_flows: np.ndarray
    pcc_flow: Optional[tuple[float, float]]
    mismatch_norm: float
    iterations: int

    @property
    def vm(self) -> np.ndarray:
        return np.abs(self.v)

    @property
    def va(self) -> np.ndarray:
        return np.angle(self.v)

    @property
    def branch_p(self) -> np.ndarray:
        return self.branch_flows.real

    @property
    def branch_q(self) -> np.ndarray:
        return self.branch_flows.imag

    @property
    def branch_s(self) -> np.ndarray:
        return np.abs(self.branch_flows)


def _jacobian_blocks(Y: np.ndarray, V: np.ndarray):
    I = Y @ V
    Vn = V / np.abs(V)
    dS_dVm = V[:, None] * np.conj(Y * Vn[None, :])
    dS_dVm[np.diag_indices_from(dS_dVm)] += np.conj(I) * Vn
    dS_dVa = -1j * V[:, None] * np.conj(Y * V[None, :])
    dS_dVa[np.diag_indices_from(dS_dVa)] += 1j * V * np.conj(I)
    return I, dS_dVa, dS_dVm


def _jacobian(c: _Compiled, V: np.ndarray) -> np.ndarray:
    _, dS_dVa, dS_dVm = _jacobian_blocks(c.Y, V)
    pq = c.pq
    Sa = dS_dVa[np.ix_(pq, pq)]
    Sm = dS_dVm[np.ix_(pq, pq)]
    return np.block([[Sa.real, Sm.real], [Sa.imag, Sm.imag]])


def solve_power_flow(
    network: Network,
    u: np.ndarray,
    start: Optional[np.ndarray] = None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> PowerFlowSolution:
    """Solve the AC power flow for actuator inputs ``u`` (stacked p then q).

    Parameters
    ----------
    network : Network
    u : ndarray, shape (2 * n_actuators,)
    start : ndarray of complex, optional
        Voltage guess (warm start). Flat start when omitted.
    tol : float
        Infinity-norm bound on the power mismatch at non-slack buses [pu].

    Raises
    ------
    PowerFlowDivergence
        If the tolerance is not met within ``max_iter`` Newton steps.
    """
    c = _compiled(network)
    s_spec = network.bus_injections(u)
    pq = c.pq
    npq = len(pq)

    if start is None:
        vm = np.ones(network.n_bus)
        va = np.zeros(network.n_bus)
    else:
        start = np.asarray(start, dtype=complex)
        vm = np.abs(start).copy()
        va = np.angle(start).copy()
    vm[c.slack] = c.v_slack
    va[c.slack] = 0.0

    V = vm * np.exp(1j * va)
    it = 0
    while True:
        mis = V * np.conj(c.Y @ V) - s_spec
        F = np.concatenate([mis.real[pq], mis.imag[pq]])
        norm = float(np.max(np.abs(F))) if npq else 0.0
        if not np.isfinite(norm):
            raise PowerFlowDivergence("power flow produced non-finite mismatch", norm, it)
        if norm < tol:
            break
        if it >= max_iter:
            raise PowerFlowDivergence(
                f"power flow did not converge in {max_iter} iterations "
                f"(residual {norm:.3e} pu)",
                norm,
                it,
            )
        J = _jacobian(c, V)
        try:
            dx = np.linalg.solve(J, F)
        except np.linalg.LinAlgError:
            raise PowerFlowDivergence("singular power-flow Jacobian", norm, it) from None
        va[pq] -= dx[:npq]
        vm[pq] -= dx[npq:]
        V = vm * np.exp(1j * va)
        it += 1

    I_f = c.yff * V[c.f] + c.yft * V[c.t]
    flows = V[c.f] * np.conj(I_f)
    pcc = None
    if network.pcc_branch is not None:
        s = flows[network.pcc_branch]
        pcc = (float(s.real), float(s.imag))
    return PowerFlowSolution(
        v=V, branch_flows=flows, pcc_flow=pcc, mismatch_norm=norm, iterations=it
    )


# -- monitored outputs -------------------------------------------------------


@dataclass(frozen=True)
class OutputSpec:
    """Which plant outputs the controller monitors, in row order:
    bus voltage magnitudes, branch apparent flows, then PCC p and q."""

    vm_buses: tuple[int, ...]
    flow_branches: tuple[int, ...] = ()
    pcc: bool = False

    @classmethod
    def default(cls, network: Network) -> "OutputSpec":
        return cls(
            vm_buses=tuple(int(b) for b in network.pq_buses),
            flow_branches=tuple(i for i, br in enumerate(network.branches) if br.monitored),
            pcc=network.pcc_branch is not None,
        )

    @property
    def size(self) -> int:
        return len(self.vm_buses) + len(self.flow_branches) + (2 if self.pcc else 0)

    @property
    def pcc_rows(self) -> tuple[int, int]:
        if not self.pcc:
            raise ValueError("output set has no PCC rows")
        return self.size - 2, self.size - 1

    def labels(self) -> list[str]:
        out = [f"vm_{b}" for b in self.vm_buses]
        out += [f"s_{i}" for i in self.flow_branches]
        if self.pcc:
            out += ["pcc_p", "pcc_q"]
        return out

    def measure(self, sol: PowerFlowSolution) -> np.ndarray:
        parts = [sol.vm[list(self.vm_buses)], sol.branch_s[list(self.flow_branches)]]
        if self.pcc:
            if sol.pcc_flow is None:
                raise ValueError("solution carries no PCC flow")
            parts.append(np.asarray(sol.pcc_flow))
        return np.concatenate(parts).astype(float)

    def bounds(self, network: Network, v_margin: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
        """Output limits; ``v_margin`` [pu] shrinks every voltage band from both sides."""
        lo = [network.buses[b].v_min + v_margin for b in self.vm_buses]
        hi = [network.buses[b].v_max - v_margin for b in self.vm_buses]
        lo += [-np.inf] * len(self.flow_branches)
        hi += [network.branches[i].s_max or np.inf for i in self.flow_branches]
        if self.pcc:
            lo += [-np.inf, -np.inf]
            hi += [np.inf, np.inf]
        return np.array(lo, dtype=float), np.array(hi, dtype=float)


@dataclass(frozen=True)
class SensitivityMatrix:
    matrix: np.ndarray
    row_labels: tuple[str, ...] = field(default=())
    col_labels: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        if self.row_labels and len(self.row_labels) != self.matrix.shape[0]:
            raise ValueError("row label count does not match matrix")
        if self.col_labels and len(self.col_labels) != self.matrix.shape[1]:
            raise ValueError("column label count does not match matrix")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("sensitivity matrix has non-finite entries")

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape


def input_labels(network: Network) -> tuple[str, ...]:
    names = [a.label or f"act{i}" for i, a in enumerate(network.actuators)]
    return tuple([f"p_{n}" for n in names] + [f"q_{n}" for n in names])


def compute_sensitivities(
    network: Network,
    sol: PowerFlowSolution,
    outputs: Optional[OutputSpec] = None,
    cond_limit: float = 1e12,
) -> SensitivityMatrix:
    """Linear map from actuator inputs to monitored outputs at ``sol``.

    Columns are obtained by solving with the converged Newton Jacobian;
    branch-flow rows follow by the chain rule through the voltages. Apparent
    power rows are zero where the flow itself is zero.
    """
    if outputs is None:
        outputs = OutputSpec.default(network)
    c = _compiled(network)
    V = sol.v
    pq = c.pq
    npq = len(pq)
    m = network.n_actuators
    n = network.n_bus

    J = _jacobian(c, V)
    if npq and np.linalg.cond(J) > cond_limit:
        raise IllConditionedOperatingPoint("power-flow Jacobian is near singular")

    # d(mismatch)/du: actuator p enters the P row of its bus, q the Q row
    pos = np.full(n, -1, dtype=int)
    pos[pq] = np.arange(npq)
    E = np.zeros((2 * npq, 2 * m))
    for i, b in enumerate(c.act_bus):
        E[pos[b], i] = 1.0
        E[npq + pos[b], m + i] = 1.0
    X = np.linalg.solve(J, E) if npq else np.zeros((0, 2 * m))

    dva = np.zeros((n, 2 * m))
    dvm = np.zeros((n, 2 * m))
    dva[pq] = X[:npq]
    dvm[pq] = X[npq:]
    vm = np.abs(V)
    dV = V[:, None] * (1j * dva + dvm / vm[:, None])

    rows = [dvm[list(outputs.vm_buses)]]
    need = list(outputs.flow_branches)
    if outputs.pcc:
        need.append(network.pcc_branch)
    if need:
        idx = np.array(need, dtype=int)
        f, t = c.f[idx], c.t[idx]
        yff, yft = c.yff[idx, None], c.yft[idx, None]
        I_f = (yff * V[f, None] + yft * V[t, None])
        S_f = sol.branch_flows[idx]
        dS = dV[f] * np.conj(I_f) + V[f, None] * np.conj(yff * dV[f] + yft * dV[t])
        nf = len(outputs.flow_branches)
        s_abs = np.abs(S_f[:nf])
        ds = np.zeros((nf, 2 * m))
        nz = s_abs > 0
        ds[nz] = (
            S_f[:nf][nz, None].real * dS[:nf][nz].real
            + S_f[:nf][nz, None].imag * dS[:nf][nz].imag
        ) / s_abs[nz, None]
        rows.append(ds)
        if outputs.pcc:
            rows.append(dS[nf:].real)
            rows.append(dS[nf:].imag)
    mat = np.vstack(rows) if rows else np.zeros((0, 2 * m))
    return SensitivityMatrix(
        matrix=mat, row_labels=tuple(outputs.labels()), col_labels=input_labels(network)
    )
