"""
Closed-loop scenarios: the congestion-management and interface-tracking case
studies, settle detection and the (alpha, beta) sweep.

Every scenario is a tree of layers; a single-controller study is a tree with
one node. One iteration is one :func:`~ofoflex.hierarchy.hierarchy_tick`.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .controller import (
    CONGESTION,
    RECOMPUTE,
    TRACKING,
    ControllerConfig,
    ControllerState,
    ObjectiveSpec,
    QpFailure,
    StepRecord,
)
from .fixtures import FIXTURES, WPP_LABEL, cigre_mv_fixture, lv_feeder_fixture
from .grid import GridError, Network, load_network, replace_network
from .hierarchy import (
    InterfaceMessage,
    LayerNode,
    LayerTree,
    TickFailure,
    attach_children,
    hierarchy_tick,
)
from .powerflow import OutputSpec, input_labels, solve_power_flow
from .qp import ConstraintSpec, ParameterError

ACTUATOR_DISCONNECT = "actuator_disconnect"
LOAD_STEP = "load_step"
SETPOINT_CHANGE = "setpoint_change"
EVENT_KINDS = (ACTUATOR_DISCONNECT, LOAD_STEP, SETPOINT_CHANGE)

DEFAULT_ALPHAS = tuple(round(0.009 * i, 3) for i in range(1, 11))
DEFAULT_BETAS = tuple(round(0.1 * i, 1) for i in range(4, 11))

# norm(u) beyond this multiple of the total actuator capacity counts as divergence
DIVERGENCE_FACTOR = 1e3


class ScenarioError(ValueError):
    """A scenario description is malformed."""


@dataclass(frozen=True)
class Event:
    at_iteration: int
    kind: str
    target: str
    payload: tuple[float, ...] = ()
    layer: Optional[str] = None

    def __post_init__(self) -> None:
        if self.kind not in EVENT_KINDS:
            raise ScenarioError(f"unknown event kind {self.kind!r}")
        if self.at_iteration < 0:
            raise ScenarioError("event iteration must be nonnegative")


@dataclass(frozen=True)
class LayerSpec:
    """One controlled grid layer.

    ``objective`` is ``{"kind": "congestion", "a_weight": .., "b_weight": ..}``
    or ``{"kind": "tracking", "p_set": .., "q_set": ..}``. Tracking layers
    with a parent get their setpoint from the parent and may omit it.
    """

    name: str
    network: Network
    objective: dict
    parent: Optional[str] = None
    coupling_bus: Optional[int] = None
    outputs: Optional[OutputSpec] = None
    # controller-side tightening of voltage bands [pu]
    v_margin: float = 0.0


@dataclass(frozen=True)
class Scenario:
    name: str
    layers: tuple[LayerSpec, ...]
    alpha: float
    beta: float
    events: tuple[Event, ...] = ()
    max_iterations: int = 300
    noise_std: float = 0.0
    seed: int = 0
    sensitivity_policy: str = RECOMPUTE
    use_momentum: bool = True
    settle_eps_rel: float = 0.01
    settle_hold: int = 5

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ScenarioError("max_iterations must be >= 1")
        if not 0.0 < self.alpha <= 1.0:
            raise ParameterError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not 0.0 < self.beta <= 1.0:
            raise ParameterError(f"beta must lie in (0, 1], got {self.beta}")
        for ev in self.events:
            if ev.at_iteration >= self.max_iterations:
                raise ScenarioError(
                    f"event at k={ev.at_iteration} lies beyond the horizon {self.max_iterations}"
                )
        roots = [ls for ls in self.layers if ls.parent is None]
        if len(roots) != 1:
            raise ScenarioError(f"expected exactly one root layer, found {len(roots)}")

    @property
    def root(self) -> LayerSpec:
        return next(ls for ls in self.layers if ls.parent is None)

    @property
    def is_tracking(self) -> bool:
        return self.root.objective.get("kind") == TRACKING

    @property
    def reference(self) -> tuple[float, float]:
        obj = self.root.objective
        return float(obj["p_set"]), float(obj["q_set"])

    @property
    def settle_eps(self) -> float:
        return self.settle_eps_rel * float(np.hypot(*self.reference))

    def with_parameters(self, **changes) -> "Scenario":
        return replace(self, **changes)


@dataclass
class Trajectory:
    root: str
    records: dict[str, list[StepRecord]]
    input_labels: dict[str, tuple[str, ...]]
    output_labels: dict[str, tuple[str, ...]]
    limits: dict[str, list[ConstraintSpec]]
    messages: list[InterfaceMessage] = field(default_factory=list)
    # plant voltage magnitudes and PCC flow (p, q) per iteration
    vm: dict[str, list[np.ndarray]] = field(default_factory=dict)
    pcc_flow: dict[str, list[tuple[float, float]]] = field(default_factory=dict)
    converged: bool = True
    failure: Optional[str] = None
    settled_at: Optional[int] = None

    def __len__(self) -> int:
        return len(self.records[self.root])

    @property
    def root_records(self) -> list[StepRecord]:
        return self.records[self.root]

    def pcc(self, layer: Optional[str] = None) -> np.ndarray:
        """Measured (p, q) at the layer's PCC per iteration."""
        layer = layer or self.root
        labels = self.output_labels[layer]
        ip, iq = labels.index("pcc_p"), labels.index("pcc_q")
        return np.array([[r.y[ip], r.y[iq]] for r in self.records[layer]]).reshape(-1, 2)

    def outputs(self, layer: Optional[str] = None) -> np.ndarray:
        return np.array([r.y for r in self.records[layer or self.root]])

    def inputs(self, layer: Optional[str] = None) -> np.ndarray:
        return np.array([r.u for r in self.records[layer or self.root]])


@dataclass(frozen=True)
class SweepResult:
    alphas: tuple[float, ...]
    betas: tuple[float, ...]
    # (alpha, beta) -> (settled_at, converged)
    cells: dict

    def __post_init__(self) -> None:
        for key, (settled, conv) in self.cells.items():
            if conv != (settled is not None):
                raise ValueError(f"cell {key}: converged flag disagrees with settle index")

    def settled_at(self, alpha: float, beta: float) -> Optional[int]:
        return self.cells[(alpha, beta)][0]

    def converged(self, alpha: float, beta: float) -> bool:
        return self.cells[(alpha, beta)][1]

    def rows(self):
        """Cells in alpha-major order."""
        for a in self.alphas:
            for b in self.betas:
                s, c = self.cells[(a, b)]
                yield a, b, s, c


# -- building ----------------------------------------------------------------


def _make_objective(spec: dict, network: Network, outputs: OutputSpec) -> ObjectiveSpec:
    kind = spec.get("kind")
    if kind == CONGESTION:
        p_nom = np.array([a.p_nominal for a in network.actuators])
        return ObjectiveSpec.congestion(
            p_nom, a_weight=float(spec.get("a_weight", 1.0)), b_weight=float(spec.get("b_weight", 0.1))
        )
    if kind == TRACKING:
        return ObjectiveSpec.tracking(
            spec.get("p_set", 0.0), spec.get("q_set", 0.0), pcc_rows=outputs.pcc_rows
        )
    raise ScenarioError(f"unknown objective kind {kind!r}")


def build_tree(scenario: Scenario) -> LayerTree:
    specs = {ls.name: ls for ls in scenario.layers}
    if len(specs) != len(scenario.layers):
        raise ScenarioError("layer names must be unique")
    kids: dict[str, list[str]] = {n: [] for n in specs}
    for ls in scenario.layers:
        if ls.parent is not None:
            if ls.parent not in specs:
                raise ScenarioError(f"layer {ls.name!r}: unknown parent {ls.parent!r}")
            if ls.coupling_bus is None:
                raise ScenarioError(f"layer {ls.name!r}: coupling_bus required with a parent")
            kids[ls.parent].append(ls.name)

    nodes: dict[str, LayerNode] = {}

    def build(name: str, stack: tuple[str, ...]) -> LayerNode:
        if name in stack:
            raise ScenarioError("cycle in layer graph")
        ls = specs[name]
        net = ls.network
        child_nodes = [build(c, stack + (name,)) for c in kids[name]]
        child_index: dict[str, int] = {}
        if child_nodes:
            net, child_index = attach_children(
                net, {c.name: (c.network, specs[c.name].coupling_bus) for c in child_nodes}
            )
        outputs = ls.outputs or OutputSpec.default(net)
        if ls.outputs is not None and ls.parent is not None and not outputs.pcc:
            raise ScenarioError(f"layer {name!r}: a child layer must monitor its PCC")
        objective = _make_objective(ls.objective, net, outputs)
        u0 = net.nominal_inputs()
        m = net.n_actuators
        injections = {}
        for c in child_nodes:
            sol = solve_power_flow(c.network, c.state.u)
            inj = (-sol.pcc_flow[0], -sol.pcc_flow[1])
            injections[c.name] = inj
            idx = child_index[c.name]
            lo, hi = net.input_bounds()
            u0[idx] = min(max(inj[0], lo[idx]), hi[idx])
            u0[m + idx] = min(max(inj[1], lo[m + idx]), hi[m + idx])
        if ls.parent is not None and objective.kind == TRACKING and "p_set" not in ls.objective:
            sol = solve_power_flow(net, u0)
            objective = objective.with_setpoint(*sol.pcc_flow)
        u_min, u_max = net.input_bounds()
        y_min, y_max = outputs.bounds(net, ls.v_margin)
        y_lo, y_hi = outputs.bounds(net)
        config = ControllerConfig(
            alpha=scenario.alpha,
            beta=scenario.beta,
            objective=objective,
            limits=ConstraintSpec(u_min, u_max, y_min, y_max),
            check_limits=ConstraintSpec(u_min, u_max, y_lo, y_hi),
            sensitivity_policy=scenario.sensitivity_policy,
            use_momentum=scenario.use_momentum,
        )
        node = LayerNode(
            name=name,
            network=net,
            config=config,
            state=ControllerState(u=u0),
            outputs=outputs,
            parent=ls.parent,
            children=[(c.name, child_index[c.name]) for c in child_nodes],
            child_injection=injections,
        )
        nodes[name] = node
        return node

    build(scenario.root.name, ())
    if len(nodes) != len(specs):
        raise ScenarioError("some layers are not reachable from the root")
    return LayerTree(list(nodes.values()), noise_std=scenario.noise_std, seed=scenario.seed)


def _apply_event(tree: LayerTree, ev: Event) -> None:
    node = tree[ev.layer or tree.root]
    if ev.kind == ACTUATOR_DISCONNECT:
        try:
            i = node.network.actuator_index(ev.target)
        except KeyError:
            raise ScenarioError(f"event targets unknown actuator {ev.target!r}") from None
        m = node.network.n_actuators
        limits = node.config.limits.with_input_box(i, 0.0, 0.0).with_input_box(m + i, 0.0, 0.0)
        check = node.config.check_limits
        if check is not None:
            check = check.with_input_box(i, 0.0, 0.0).with_input_box(m + i, 0.0, 0.0)
        u = node.state.u.copy()
        u[i] = 0.0
        u[m + i] = 0.0
        node.state = replace(node.state, u=u)
        node.config = replace(node.config, limits=limits, check_limits=check)
    elif ev.kind == LOAD_STEP:
        bus = int(ev.target)
        inj = list(node.network.injections)
        inj[bus] += complex(*ev.payload)
        node.network = replace_network(node.network, injections=tuple(inj))
    elif ev.kind == SETPOINT_CHANGE:
        obj = node.config.objective.with_setpoint(*ev.payload)
        node.config = replace(node.config, objective=obj)


def _capacity(net: Network) -> float:
    lo, hi = net.input_bounds()
    return float(np.sum(np.maximum(np.abs(lo), np.abs(hi)))) or 1.0


def run_scenario(scenario: Scenario, early_stop: bool = False) -> Trajectory:
    """Closed loop: events, plant solve, measurement, controller update.

    With ``early_stop`` a tracking run ends once the settle window has been
    observed; the settle index is unaffected by the truncation.
    """
    tree = build_tree(scenario)
    names = sorted(tree.nodes)
    traj = Trajectory(
        root=tree.root,
        records={n: [] for n in names},
        input_labels={n: input_labels(tree[n].network) for n in names},
        output_labels={n: tuple(tree[n].outputs.labels()) for n in names},
        limits={n: [] for n in names},
        messages=tree.messages,
        vm={n: [] for n in names},
        pcc_flow={n: [] for n in names},
    )
    events: dict[int, list[Event]] = {}
    for ev in scenario.events:
        events.setdefault(ev.at_iteration, []).append(ev)

    tracking = scenario.is_tracking
    if tracking:
        eps = scenario.settle_eps
        hold = scenario.settle_hold
        streak = 0
        ip, iq = tree[tree.root].config.objective.pcc_rows
    caps = {n: _capacity(tree[n].network) for n in names}

    for k in range(scenario.max_iterations):
        for ev in events.get(k, ()):
            _apply_event(tree, ev)
        for n in names:
            traj.limits[n].append(tree[n].config.limits)
        try:
            recs = hierarchy_tick(tree, k)
        except (TickFailure, QpFailure) as exc:
            traj.converged = False
            traj.failure = str(exc)
            for n in names:
                traj.limits[n].pop()
            break
        for n in names:
            sol = tree[n].last_solution
            traj.records[n].append(recs[n])
            traj.vm[n].append(sol.vm)
            flow = sol.pcc_flow if sol.pcc_flow is not None else (np.nan, np.nan)
            traj.pcc_flow[n].append((float(flow[0]), float(flow[1])))
        if any(np.linalg.norm(tree[n].state.u) > DIVERGENCE_FACTOR * caps[n] for n in names):
            traj.converged = False
            traj.failure = "input norm exceeded divergence guard"
            break
        if tracking:
            root = tree[tree.root]
            rec = recs[tree.root]
            obj = root.config.objective
            dist = np.hypot(rec.y[ip] - obj.p_set, rec.y[iq] - obj.q_set)
            streak = streak + 1 if dist <= eps else 0
            if streak >= hold and traj.settled_at is None:
                traj.settled_at = k - hold + 1
                if early_stop:
                    break
    return traj


def detect_settled(
    trajectory: Union[Trajectory, np.ndarray],
    reference: tuple[float, float],
    eps: float,
    hold: int,
) -> Optional[int]:
    """First k from which the PCC stays within ``eps`` of ``reference`` for
    ``hold`` consecutive iterations, or ``None``."""
    pts = trajectory.pcc() if isinstance(trajectory, Trajectory) else np.asarray(trajectory)
    pts = pts.reshape(-1, 2)
    inside = np.hypot(pts[:, 0] - reference[0], pts[:, 1] - reference[1]) <= eps
    streak = 0
    for k, ok in enumerate(inside):
        streak = streak + 1 if ok else 0
        if streak >= hold:
            return k - hold + 1
    return None


def _sweep_cell(args) -> tuple[float, float, Optional[int]]:
    base, alpha, beta = args
    traj = run_scenario(base.with_parameters(alpha=alpha, beta=beta), early_stop=True)
    settled = None
    if traj.converged or traj.settled_at is not None:
        settled = traj.settled_at
    return alpha, beta, settled


def parameter_sweep(
    base: Scenario,
    alphas: Sequence[float] = DEFAULT_ALPHAS,
    betas: Sequence[float] = DEFAULT_BETAS,
    workers: int = 1,
) -> SweepResult:
    """Settle iteration for each (alpha, beta) cell of a tracking scenario."""
    if not alphas or not betas:
        raise ScenarioError("alpha and beta lists must be non-empty")
    if not base.is_tracking:
        raise ScenarioError("parameter sweeps need a tracking scenario")
    jobs = [(base, float(a), float(b)) for a in alphas for b in betas]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_cell, jobs))
    else:
        results = [_sweep_cell(j) for j in jobs]
    cells = {(a, b): (s, s is not None) for a, b, s in results}
    return SweepResult(tuple(float(a) for a in alphas), tuple(float(b) for b in betas), cells)


# -- case studies ------------------------------------------------------------

LEFT_FEEDER_BUSES = tuple(range(1, 12))
# a linearised step that lands exactly on the band edge falls short by ~1e-4 pu
CASE1_V_MARGIN = 0.001


def left_feeder_outputs(network: Network) -> OutputSpec:
    lines = tuple(
        i
        for i, br in enumerate(network.branches)
        if br.monitored and br.from_bus in LEFT_FEEDER_BUSES and br.to_bus in LEFT_FEEDER_BUSES
    )
    return OutputSpec(vm_buses=LEFT_FEEDER_BUSES, flow_branches=lines, pcc=False)


def engineer_violation(
    network: Network, outputs: OutputSpec, step: float = 0.05, max_factor: float = 5.0
) -> tuple[Network, float]:
    """Scale loads up in ``step`` increments until a monitored voltage leaves its band."""
    lo, _ = outputs.bounds(network)
    nv = len(outputs.vm_buses)
    factor = 1.0
    while factor <= max_factor:
        scaled = network.scaled_loads(factor)
        y = outputs.measure(solve_power_flow(scaled, scaled.nominal_inputs()))
        if np.any(y[:nv] < lo[:nv]):
            return scaled, factor
        factor = round(factor + step, 10)
    raise ScenarioError("no load scaling up to max_factor produces a voltage violation")


def case1_scenario(
    alpha: float = 0.8,
    beta: float = 0.9,
    max_iterations: int = 50,
    disconnect_at: int = 24,
    a_weight: float = 1.0,
    b_weight: float = 0.1,
    load_scale: Optional[float] = None,
    v_margin: float = CASE1_V_MARGIN,
) -> Scenario:
    """Congestion management on the left MV feeder with a wind-plant trip."""
    net = cigre_mv_fixture()
    outputs = left_feeder_outputs(net)
    if load_scale is None:
        net, _ = engineer_violation(net, outputs)
    else:
        net = net.scaled_loads(load_scale)
    layer = LayerSpec(
        name="mv",
        network=net,
        objective={"kind": CONGESTION, "a_weight": a_weight, "b_weight": b_weight},
        outputs=outputs,
        v_margin=v_margin,
    )
    return Scenario(
        name="case1",
        layers=(layer,),
        alpha=alpha,
        beta=beta,
        events=(Event(disconnect_at, ACTUATOR_DISCONNECT, WPP_LABEL),),
        max_iterations=max_iterations,
    )


CASE2_SETPOINT = (10.0, 3.0)
CASE2_LV = (("lv1", 5, 1), ("lv2", 8, 4))


def case2_scenario(
    alpha: float = 0.05,
    beta: float = 1.0,
    max_iterations: int = 300,
    setpoint: tuple[float, float] = CASE2_SETPOINT,
) -> Scenario:
    """PCC tracking at the HV/MV transformer with two LV feeders below."""
    mv = cigre_mv_fixture()
    base = mv.base_mva
    layers = [
        LayerSpec(
            name="mv",
            network=mv,
            objective={"kind": TRACKING, "p_set": setpoint[0] / base, "q_set": setpoint[1] / base},
        )
    ]
    for name, bus, seed in CASE2_LV:
        layers.append(
            LayerSpec(
                name=name,
                network=lv_feeder_fixture(seed, base_mva=base),
                objective={"kind": TRACKING},
                parent="mv",
                coupling_bus=bus,
            )
        )
    return Scenario(
        name="case2", layers=tuple(layers), alpha=alpha, beta=beta, max_iterations=max_iterations
    )


# -- JSON --------------------------------------------------------------------


def _resolve_network(ref, base_dir: Path, where: str) -> Network:
    if isinstance(ref, str):
        if ref in FIXTURES:
            return FIXTURES[ref]()
        path = base_dir / ref
        if path.suffix == ".json":
            if not path.exists():
                raise ScenarioError(f"{where}: network file {path} not found")
            return load_network(path)
        raise ScenarioError(f"{where}: unknown fixture {ref!r}")
    if isinstance(ref, dict):
        if "file" in ref:
            return _resolve_network(ref["file"], base_dir, where)
        name = ref.get("fixture")
        if name not in FIXTURES:
            raise ScenarioError(f"{where}: unknown fixture {name!r}")
        kwargs = {k: v for k, v in ref.items() if k != "fixture"}
        return FIXTURES[name](**kwargs)
    raise ScenarioError(f"{where}: network must be a fixture name or an object")


def scenario_from_dict(data: dict, base_dir: Path = Path(".")) -> Scenario:
    layers = []
    raw_layers = data.get("layers")
    if not raw_layers:
        raise ScenarioError("scenario: 'layers' must be a non-empty list")
    for i, ld in enumerate(raw_layers):
        where = f"layers[{i}]"
        if "name" not in ld or "network" not in ld or "objective" not in ld:
            raise ScenarioError(f"{where}: needs 'name', 'network' and 'objective'")
        net = _resolve_network(ld["network"], base_dir, where)
        outputs = None
        mon = ld.get("monitor")
        if mon == "left_feeder":
            outputs = left_feeder_outputs(net)
        elif isinstance(mon, dict):
            outputs = OutputSpec(
                vm_buses=tuple(mon.get("vm_buses", ())),
                flow_branches=tuple(mon.get("flow_branches", ())),
                pcc=bool(mon.get("pcc", False)),
            )
        elif mon is not None:
            raise ScenarioError(f"{where}: unsupported monitor spec {mon!r}")
        scale = ld.get("load_scale")
        if scale == "auto":
            net, _ = engineer_violation(net, outputs or OutputSpec.default(net))
        elif scale is not None:
            net = net.scaled_loads(float(scale))
        layers.append(
            LayerSpec(
                name=ld["name"],
                network=net,
                objective=dict(ld["objective"]),
                parent=ld.get("parent"),
                coupling_bus=ld.get("coupling_bus"),
                outputs=outputs,
                v_margin=float(ld.get("v_margin", 0.0)),
            )
        )
    events = []
    for i, ed in enumerate(data.get("events", [])):
        try:
            events.append(
                Event(
                    at_iteration=int(ed["at_iteration"]),
                    kind=ed["kind"],
                    target=str(ed["target"]),
                    payload=tuple(float(x) for x in ed.get("payload", ())),
                    layer=ed.get("layer"),
                )
            )
        except KeyError as exc:
            raise ScenarioError(f"events[{i}]: missing field {exc.args[0]!r}") from None
    settle = data.get("settle", {})
    try:
        return Scenario(
            name=data.get("name", "scenario"),
            layers=tuple(layers),
            alpha=float(data["alpha"]),
            beta=float(data["beta"]),
            events=tuple(events),
            max_iterations=int(data.get("max_iterations", 300)),
            noise_std=float(data.get("noise_std", 0.0)),
            seed=int(data.get("seed", 0)),
            sensitivity_policy=data.get("sensitivity_policy", RECOMPUTE),
            settle_eps_rel=float(settle.get("eps_rel", 0.01)),
            settle_hold=int(settle.get("hold", 5)),
        )
    except KeyError as exc:
        raise ScenarioError(f"scenario: missing field {exc.args[0]!r}") from None


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ScenarioError(f"scenario file {path} not found") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: line {exc.lineno} col {exc.colno}: {exc.msg}") from None
    try:
        return scenario_from_dict(data, base_dir=path.parent)
    except (ScenarioError, GridError, ParameterError) as exc:
        raise ScenarioError(f"{path}: {exc}") from None
