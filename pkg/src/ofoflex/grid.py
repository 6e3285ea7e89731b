"""
Network data model and admittance assembly.

All electrical quantities are per-unit on a single power base
(``Network.base_mva``) and each bus's own voltage base. Injections follow the
generator convention: positive ``p``/``q`` flows into the network, loads are
negative.

Bus ids are positional: bus ``i`` is ``network.buses[i]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components


class GridError(ValueError):
    """Raised when a network or one of its elements is malformed."""


SLACK = "slack"
PQ = "pq"


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str = PQ
    v_nominal: float = 1.0
    v_min: Optional[float] = None
    v_max: Optional[float] = None
    shunt: complex = 0j
    name: str = ""

    def __post_init__(self) -> None:
        if self.kind not in (SLACK, PQ):
            raise GridError(f"bus {self.id}: unknown kind {self.kind!r}")
        # band defaults to nominal +/- 5 %
        if self.v_min is None:
            object.__setattr__(self, "v_min", 0.95 * self.v_nominal)
        if self.v_max is None:
            object.__setattr__(self, "v_max", 1.05 * self.v_nominal)
        if not self.v_min < self.v_nominal < self.v_max:
            raise GridError(
                f"bus {self.id}: need v_min < v_nominal < v_max, got "
                f"{self.v_min} / {self.v_nominal} / {self.v_max}"
            )


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    z: complex
    b_shunt: float = 0.0
    s_max: Optional[float] = None
    is_transformer: bool = False
    tap: float = 1.0
    name: str = ""

    def __post_init__(self) -> None:
        if abs(self.z) <= 0.0:
            raise GridError(f"branch {self.from_bus}-{self.to_bus}: zero series impedance")
        if self.from_bus == self.to_bus:
            raise GridError(f"branch {self.from_bus}-{self.to_bus}: self loop")
        if self.s_max is not None and self.s_max <= 0:
            raise GridError(f"branch {self.from_bus}-{self.to_bus}: s_max must be > 0")
        if self.tap <= 0:
            raise GridError(f"branch {self.from_bus}-{self.to_bus}: tap must be > 0")

    @property
    def monitored(self) -> bool:
        return self.s_max is not None

    def admittances(self) -> tuple[complex, complex, complex, complex]:
        """Two-port entries ``(yff, yft, ytf, ytt)``, tap on the from side."""
        y = 1.0 / self.z
        half_b = 0.5j * self.b_shunt
        t = self.tap
        return (y + half_b) / t**2, -y / t, -y / t, y + half_b


@dataclass(frozen=True)
class Actuator:
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    p_nominal: float = 0.0
    label: str = ""

    def __post_init__(self) -> None:
        if not self.p_min <= self.p_nominal <= self.p_max:
            raise GridError(
                f"actuator {self.label or self.bus}: need p_min <= p_nominal <= p_max"
            )
        if self.q_min > self.q_max:
            raise GridError(f"actuator {self.label or self.bus}: q_min > q_max")


@dataclass(frozen=True)
class Network:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    actuators: tuple[Actuator, ...] = ()
    injections: tuple[complex, ...] = ()
    base_mva: float = 1.0
    pcc_branch: Optional[int] = None
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "actuators", tuple(self.actuators))
        inj = tuple(complex(s) for s in self.injections)
        if not inj:
            inj = (0j,) * len(self.buses)
        object.__setattr__(self, "injections", inj)
        self.validate()

    # -- structure -----------------------------------------------------------

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_actuators(self) -> int:
        return len(self.actuators)

    @property
    def slack(self) -> int:
        return next(b.id for b in self.buses if b.kind == SLACK)

    @property
    def pq_buses(self) -> np.ndarray:
        return np.array([b.id for b in self.buses if b.kind == PQ], dtype=int)

    def validate(self) -> None:
        n = len(self.buses)
        if n == 0:
            raise GridError("network has no buses")
        for pos, bus in enumerate(self.buses):
            if bus.id != pos:
                raise GridError(f"bus ids must be positional, bus at {pos} has id {bus.id}")
        n_slack = sum(b.kind == SLACK for b in self.buses)
        if n_slack != 1:
            raise GridError(f"expected exactly one slack bus, found {n_slack}")
        if len(self.injections) != n:
            raise GridError(f"{len(self.injections)} injections for {n} buses")
        for br in self.branches:
            if not (0 <= br.from_bus < n and 0 <= br.to_bus < n):
                raise GridError(f"branch {br.from_bus}-{br.to_bus} references unknown bus")
        slack = self.slack
        for act in self.actuators:
            if not 0 <= act.bus < n:
                raise GridError(f"actuator {act.label!r} at unknown bus {act.bus}")
            if act.bus == slack:
                raise GridError(f"actuator {act.label!r} sits on the slack bus")
        if self.pcc_branch is not None and not 0 <= self.pcc_branch < len(self.branches):
            raise GridError(f"pcc_branch {self.pcc_branch} out of range")
        if n > 1:
            if not self.branches:
                raise GridError("network has no branches")
            rows = [br.from_bus for br in self.branches]
            cols = [br.to_bus for br in self.branches]
            adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
            n_comp, _ = connected_components(adj, directed=False)
            if n_comp != 1:
                raise GridError(f"network is not connected ({n_comp} islands)")

    # -- input vectors -------------------------------------------------------

    def actuator_index(self, label: str) -> int:
        for i, act in enumerate(self.actuators):
            if act.label == label:
                return i
        raise KeyError(label)

    def input_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Box of the stacked input ``[p_1..p_n, q_1..q_n]``."""
        acts = self.actuators
        lo = np.array([a.p_min for a in acts] + [a.q_min for a in acts], dtype=float)
        hi = np.array([a.p_max for a in acts] + [a.q_max for a in acts], dtype=float)
        return lo, hi

    def nominal_inputs(self) -> np.ndarray:
        acts = self.actuators
        return np.array([a.p_nominal for a in acts] + [0.0] * len(acts), dtype=float)

    def bus_injections(self, u: np.ndarray) -> np.ndarray:
        """Net complex injection per bus: uncontrolled part plus actuators."""
        u = np.asarray(u, dtype=float)
        m = self.n_actuators
        if u.shape != (2 * m,):
            raise GridError(f"input vector has shape {u.shape}, expected ({2 * m},)")
        s = np.array(self.injections, dtype=complex)
        for i, act in enumerate(self.actuators):
            s[act.bus] += u[i] + 1j * u[m + i]
        return s

    def scaled_loads(self, factor: float) -> "Network":
        """Copy with every consuming (negative-p) injection multiplied by ``factor``."""
        inj = tuple(s * factor if s.real < 0 else s for s in self.injections)
        return replace_network(self, injections=inj)


def replace_network(network: Network, **changes) -> Network:
    return replace(network, **changes)


def build_admittance(network: Network) -> np.ndarray:
    """Dense bus admittance matrix [pu]."""
    n = network.n_bus
    if n > 1 and not network.branches:
        raise GridError("cannot assemble admittance without branches")
    seen: set[tuple[int, int]] = set()
    Y = np.zeros((n, n), dtype=complex)
    for br in network.branches:
        key = (min(br.from_bus, br.to_bus), max(br.from_bus, br.to_bus))
        if key in seen and abs(br.z) < 1e-12:
            raise GridError(f"degenerate parallel branch {key}")
        seen.add(key)
        yff, yft, ytf, ytt = br.admittances()
        f, t = br.from_bus, br.to_bus
        Y[f, f] += yff
        Y[f, t] += yft
        Y[t, f] += ytf
        Y[t, t] += ytt
    for bus in network.buses:
        Y[bus.id, bus.id] += bus.shunt
    return Y


# -- per-unit helpers --------------------------------------------------------


def to_pu(value_mw: float | np.ndarray, base_mva: float) -> float | np.ndarray:
    return value_mw / base_mva


def from_pu(value_pu: float | np.ndarray, base_mva: float) -> float | np.ndarray:
    return value_pu * base_mva


# -- JSON --------------------------------------------------------------------


def network_to_dict(network: Network) -> dict:
    return {
        "name": network.name,
        "base_mva": network.base_mva,
        "pcc_branch": network.pcc_branch,
        "buses": [
            {
                "id": b.id,
                "kind": b.kind,
                "v_nominal": b.v_nominal,
                "v_min": b.v_min,
                "v_max": b.v_max,
                "g_shunt": b.shunt.real,
                "b_shunt": b.shunt.imag,
                "name": b.name,
            }
            for b in network.buses
        ],
        "branches": [
            {
                "from_bus": br.from_bus,
                "to_bus": br.to_bus,
                "r": br.z.real,
                "x": br.z.imag,
                "b_shunt": br.b_shunt,
                "s_max": br.s_max,
                "is_transformer": br.is_transformer,
                "tap": br.tap,
                "name": br.name,
            }
            for br in network.branches
        ],
        "actuators": [
            {
                "bus": a.bus,
                "p_min": a.p_min,
                "p_max": a.p_max,
                "q_min": a.q_min,
                "q_max": a.q_max,
                "p_nominal": a.p_nominal,
                "label": a.label,
            }
            for a in network.actuators
        ],
        "injections": [
            {"bus": i, "p": s.real, "q": s.imag}
            for i, s in enumerate(network.injections)
            if s != 0
        ],
    }


def _require(obj: dict, key: str, where: str):
    try:
        return obj[key]
    except KeyError:
        raise GridError(f"{where}: missing field {key!r}") from None


def network_from_dict(data: dict) -> Network:
    buses = []
    for i, b in enumerate(_require(data, "buses", "network")):
        where = f"buses[{i}]"
        buses.append(
            Bus(
                id=int(_require(b, "id", where)),
                kind=b.get("kind", PQ),
                v_nominal=float(b.get("v_nominal", 1.0)),
                v_min=b.get("v_min"),
                v_max=b.get("v_max"),
                shunt=complex(b.get("g_shunt", 0.0), b.get("b_shunt", 0.0)),
                name=b.get("name", ""),
            )
        )
    branches = []
    for i, br in enumerate(_require(data, "branches", "network")):
        where = f"branches[{i}]"
        branches.append(
            Branch(
                from_bus=int(_require(br, "from_bus", where)),
                to_bus=int(_require(br, "to_bus", where)),
                z=complex(float(br.get("r", 0.0)), float(_require(br, "x", where))),
                b_shunt=float(br.get("b_shunt", 0.0)),
                s_max=br.get("s_max"),
                is_transformer=bool(br.get("is_transformer", False)),
                tap=float(br.get("tap", 1.0)),
                name=br.get("name", ""),
            )
        )
    actuators = []
    for i, a in enumerate(data.get("actuators", [])):
        where = f"actuators[{i}]"
        actuators.append(
            Actuator(
                bus=int(_require(a, "bus", where)),
                p_min=float(_require(a, "p_min", where)),
                p_max=float(_require(a, "p_max", where)),
                q_min=float(_require(a, "q_min", where)),
                q_max=float(_require(a, "q_max", where)),
                p_nominal=float(a.get("p_nominal", 0.0)),
                label=a.get("label", ""),
            )
        )
    inj = [0j] * len(buses)
    for i, s in enumerate(data.get("injections", [])):
        where = f"injections[{i}]"
        bus = int(_require(s, "bus", where))
        if not 0 <= bus < len(buses):
            raise GridError(f"{where}: unknown bus {bus}")
        inj[bus] += complex(float(s.get("p", 0.0)), float(s.get("q", 0.0)))
    return Network(
        buses=tuple(buses),
        branches=tuple(branches),
        actuators=tuple(actuators),
        injections=tuple(inj),
        base_mva=float(data.get("base_mva", 1.0)),
        pcc_branch=data.get("pcc_branch"),
        name=data.get("name", ""),
    )


def load_network(path: str | Path) -> Network:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise GridError(f"network file {path} not found") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GridError(f"{path}: line {exc.lineno} col {exc.colno}: {exc.msg}") from None
    try:
        return network_from_dict(data)
    except GridError as exc:
        raise GridError(f"{path}: {exc}") from None


def save_network(network: Network, path: str | Path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(network), indent=2) + "\n")
