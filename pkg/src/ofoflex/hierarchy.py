"""
Cascaded OFO controllers across grid layers.

Each layer owns a network and a controller. A parent sees every child as one
(p, q) actuator at the coupling bus; the child receives the parent's input for
that actuator as its PCC setpoint and reports its measured PCC exchange back.
Nothing else crosses a layer boundary.

Sign convention at an interface: messages carry the PCC *import* of the child
(flow from the parent's coupling bus into the child). The parent's actuator
input is an injection into the parent's grid, i.e. the negated import.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .controller import FROZEN, ControllerConfig, ControllerState, StepRecord, controller_step
from .grid import Actuator, Network, replace_network
from .powerflow import (
    OutputSpec,
    PowerFlowSolution,
    SensitivityMatrix,
    compute_sensitivities,
    solve_power_flow,
)

SETPOINT_DOWN = "setpoint_down"
MEASUREMENT_UP = "measurement_up"


class TickFailure(RuntimeError):
    """A layer's plant could not be solved during a tick."""

    def __init__(self, message: str, layer: str):
        super().__init__(message)
        self.layer = layer


@dataclass(frozen=True)
class InterfaceMessage:
    tick: int
    link: str
    direction: str
    p: float
    q: float


@dataclass
class LayerNode:
    name: str
    network: Network
    config: ControllerConfig
    state: ControllerState
    outputs: OutputSpec
    parent: Optional[str] = None
    # (child name, actuator index in this layer)
    children: list[tuple[str, int]] = field(default_factory=list)
    v_guess: Optional[np.ndarray] = None
    frozen_sens: Optional[SensitivityMatrix] = None
    # physical injection currently drawn by each child [pu], keyed by name
    child_injection: dict[str, tuple[float, float]] = field(default_factory=dict)
    last_solution: Optional[PowerFlowSolution] = None
    last_y: Optional[np.ndarray] = None


def aggregate_child_flexibility(child: LayerNode | Network) -> tuple[float, float, float, float]:
    """Static flexibility box of a child seen from its parent, as an injection.

    Sum of the child's actuator boxes shifted by the baseline exchange, where
    the baseline is the child's injection into the parent with all actuators
    at zero output.
    """
    net = child.network if isinstance(child, LayerNode) else child
    if net.pcc_branch is None:
        raise ValueError(f"network {net.name!r} has no PCC branch")
    sol = solve_power_flow(net, np.zeros(2 * net.n_actuators))
    base_p, base_q = -sol.pcc_flow[0], -sol.pcc_flow[1]
    acts = net.actuators
    return (
        base_p + sum(a.p_min for a in acts),
        base_p + sum(a.p_max for a in acts),
        base_q + sum(a.q_min for a in acts),
        base_q + sum(a.q_max for a in acts),
    )


def attach_children(
    parent: Network, children: dict[str, tuple[Network, int]]
) -> tuple[Network, dict[str, int]]:
    """Add one actuator per child at its coupling bus.

    ``children`` maps a child name to ``(child network, coupling bus)``.
    Returns the extended parent network and each child's actuator index.
    """
    acts = list(parent.actuators)
    index = {}
    for name, (net, bus) in children.items():
        p_lo, p_hi, q_lo, q_hi = aggregate_child_flexibility(net)
        nominal = solve_power_flow(net, net.nominal_inputs())
        p_nom = min(max(-nominal.pcc_flow[0], p_lo), p_hi)
        index[name] = len(acts)
        acts.append(Actuator(bus, p_lo, p_hi, q_lo, q_hi, p_nominal=p_nom, label=name))
    return replace_network(parent, actuators=tuple(acts)), index


class LayerTree:
    """Layers keyed by name with exactly one root."""

    def __init__(self, nodes: list[LayerNode], noise_std: float = 0.0, seed: int = 0):
        self.nodes = {n.name: n for n in nodes}
        if len(self.nodes) != len(nodes):
            raise ValueError("layer names must be unique")
        roots = [n.name for n in nodes if n.parent is None]
        if len(roots) != 1:
            raise ValueError(f"expected exactly one root layer, found {len(roots)}")
        self.root = roots[0]
        for n in nodes:
            if n.parent is not None and n.parent not in self.nodes:
                raise ValueError(f"layer {n.name!r}: unknown parent {n.parent!r}")
            for child, _ in n.children:
                if self.nodes[child].parent != n.name:
                    raise ValueError(f"layer {child!r} does not name {n.name!r} as parent")
        # every node must be reachable from the root exactly once
        order = self.post_order()
        if len(order) != len(self.nodes):
            raise ValueError("layer graph is not a tree rooted at the root layer")
        self.noise_std = noise_std
        self.rng = np.random.default_rng(seed)
        self.messages: list[InterfaceMessage] = []

    def post_order(self) -> list[str]:
        out: list[str] = []
        seen: set[str] = set()

        def visit(name: str) -> None:
            if name in seen:
                raise ValueError("cycle in layer graph")
            seen.add(name)
            for child, _ in self.nodes[name].children:
                visit(child)
            out.append(name)

        visit(self.root)
        return out

    def __getitem__(self, name: str) -> LayerNode:
        return self.nodes[name]


def _plant_input(node: LayerNode) -> np.ndarray:
    """The node's inputs with child columns replaced by what children really draw."""
    u = node.state.u.copy()
    m = node.network.n_actuators
    for child, idx in node.children:
        p, q = node.child_injection[child]
        u[idx] = p
        u[m + idx] = q
    return u


def measure_layers(tree: LayerTree, k: int) -> None:
    """Solve every plant bottom-up and deliver PCC measurements upstream."""
    for name in tree.post_order():
        node = tree.nodes[name]
        try:
            sol = solve_power_flow(node.network, _plant_input(node), start=node.v_guess)
        except RuntimeError as exc:
            raise TickFailure(f"layer {name!r}: {exc}", name) from exc
        node.v_guess = sol.v
        node.last_solution = sol
        y = node.outputs.measure(sol)
        if tree.noise_std > 0:
            y = y + tree.rng.normal(0.0, tree.noise_std, size=y.size)
        node.last_y = y
        if node.parent is not None:
            p, q = sol.pcc_flow
            tree.messages.append(InterfaceMessage(k, f"{node.parent}->{name}", MEASUREMENT_UP, p, q))
            tree.nodes[node.parent].child_injection[name] = (-p, -q)


def hierarchy_tick(tree: LayerTree, k: int) -> dict[str, StepRecord]:
    """One synchronous OFO iteration on every layer.

    Plants are solved children-first so a parent's plant sees the exchange its
    children actually realise in this tick. Controllers then step using only
    their own measurement and the setpoint received in the previous tick; the
    parent's new child inputs are sent down for the next tick.
    """
    measure_layers(tree, k)
    records: dict[str, StepRecord] = {}
    for name in sorted(tree.nodes):
        node = tree.nodes[name]
        if node.config.sensitivity_policy == FROZEN and node.frozen_sens is not None:
            sens = node.frozen_sens
        else:
            try:
                sens = compute_sensitivities(node.network, node.last_solution, node.outputs)
            except RuntimeError as exc:
                raise TickFailure(f"layer {name!r}: {exc}", name) from exc
            if node.config.sensitivity_policy == FROZEN:
                node.frozen_sens = sens
        node.state, rec = controller_step(node.state, node.last_y, sens, node.config)
        records[name] = rec
    for name in sorted(tree.nodes):
        node = tree.nodes[name]
        m = node.network.n_actuators
        for child, idx in node.children:
            p_set, q_set = -node.state.u[idx], -node.state.u[m + idx]
            tree.messages.append(InterfaceMessage(k, f"{name}->{child}", SETPOINT_DOWN, p_set, q_set))
            cn = tree.nodes[child]
            cn.config = replace(cn.config, objective=cn.config.objective.with_setpoint(p_set, q_set))
    return records


def write_interfaces_csv(messages: list[InterfaceMessage], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tick", "link", "direction", "p", "q"])
        for msg in messages:
            w.writerow([msg.tick, msg.link, msg.direction, f"{msg.p:.12g}", f"{msg.q:.12g}"])


__all__ = [
    "InterfaceMessage",
    "LayerNode",
    "LayerTree",
    "TickFailure",
    "aggregate_child_flexibility",
    "attach_children",
    "hierarchy_tick",
    "measure_layers",
    "write_interfaces_csv",
]
