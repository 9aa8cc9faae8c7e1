"""Scenario and network description files.

Both files are YAML mappings with a documented schema (see README).
Parsing is strict: unknown keys are rejected so a typo never silently
changes an experiment.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .core import GeneratorParams, LoadParams, Network, PlantParams, build_network
from .controller import (COMM_KINDS, CommGraph, ControllerGains, QuadraticCost,
                         build_comm_topology, comm_graph_from_edges)


class ScenarioError(ValueError):
    """Raised for malformed scenario or network descriptions."""


@dataclass(frozen=True)
class StepLoad:
    """Instantaneous change of the active demand at one node."""

    t: float
    node: int
    delta_p: float

    def describe(self) -> str:
        sign = "+" if self.delta_p >= 0 else ""
        return f"step_load t={self.t:g}s node={self.node} {sign}{self.delta_p:g} p.u."


@dataclass(frozen=True)
class ClockDrift:
    """Constant bias of one node's frequency measurement, in Hz."""

    node: int
    offset_hz: float
    from_t: float = 0.0

    def describe(self) -> str:
        return (f"clock_drift node={self.node} offset={self.offset_hz:g} Hz"
                f" from t={self.from_t:g}s")


@dataclass(frozen=True)
class CommEdgeFail:
    """Loss of one communication edge: its virtual power flow is dropped."""

    t: float
    edge: tuple[int, int]

    def describe(self) -> str:
        return f"comm_edge_fail t={self.t:g}s edge={self.edge[0]}-{self.edge[1]}"


Event = StepLoad | ClockDrift | CommEdgeFail


@dataclass(frozen=True)
class IntegratorConfig:
    """Fixed-step integrator settings."""

    step: float = 5e-3
    output_every: float = 5e-2
    newton_tol: float = 1e-10
    max_newton: int = 25
    scheme: str = "rk4"
    omega_max: float = 0.1       # p.u.; beyond this the run is declared diverged
    volt_min: float = 0.2        # p.u.; model validity floor

    def __post_init__(self):
        if self.step <= 0 or self.output_every <= 0:
            raise ScenarioError("step and output interval must be positive")
        if self.newton_tol <= 0 or self.max_newton < 1:
            raise ScenarioError("bad algebraic solver settings")
        if self.scheme != "rk4":
            raise ScenarioError(f"unknown scheme {self.scheme!r}")
        ratio = self.output_every / self.step
        if abs(ratio - round(ratio)) > 1e-9:
            raise ScenarioError("output interval must be a multiple of the step")


@dataclass(frozen=True)
class Scenario:
    """Complete description of one closed-loop experiment."""

    network: dict                     # raw topology: {"nodes": [...], "lines": [...]}
    eta: float
    communication: str | tuple[tuple[int, int], ...] = "physical"
    mode: str = "lossy"
    cost_weights: tuple[float, ...] = ()
    gain_p: float = 1.0
    gain_price: float = 1.0
    gain_flow: float = 1.0
    p_load: dict[int, float] = field(default_factory=dict)
    q_load: dict[int, float] = field(default_factory=dict)
    voltage_target: float | None = 1.0
    u_field: dict[int, float] | None = None
    horizon: float = 90.0
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    events: tuple[Event, ...] = ()
    name: str = ""

    def __post_init__(self):
        if self.mode not in ("lossy", "lossless"):
            raise ScenarioError(f"unknown controller mode {self.mode!r}")
        if self.horizon <= 0:
            raise ScenarioError("horizon must be positive")
        if (self.voltage_target is None) == (self.u_field is None):
            raise ScenarioError(
                "exactly one of voltage_target / excitation values is required")
        for ev in self.events:
            t = ev.from_t if isinstance(ev, ClockDrift) else ev.t
            if not (0.0 <= t < self.horizon):
                raise ScenarioError(f"event outside the horizon: {ev.describe()}")
            if t == 0.0 and not isinstance(ev, ClockDrift):
                raise ScenarioError(f"event at t=0 is not allowed: {ev.describe()}")

    # -- resolved model objects ------------------------------------------

    def build_network(self) -> Network:
        return build_network(self.network, self.eta)

    def build_params(self) -> PlantParams:
        nodes = {n["id"]: n for n in self.network["nodes"]}
        net = self.build_network()
        gen = GeneratorParams(
            inertia=[nodes[i]["inertia"] for i in net.gen_ids],
            damping=[nodes[i]["damping"] for i in net.gen_ids],
            xd=[nodes[i]["xd"] for i in net.gen_ids],
            xd_transient=[nodes[i]["xd_transient"] for i in net.gen_ids],
            tau_voltage=[nodes[i]["tau_voltage"] for i in net.gen_ids],
        )
        load = LoadParams(damping=[nodes[i]["damping"] for i in net.load_ids])
        return PlantParams(gen=gen, load=load)

    def build_comm(self, network: Network) -> CommGraph:
        if isinstance(self.communication, str):
            return build_comm_topology(self.communication, network)
        return comm_graph_from_edges(network.node_ids, self.communication)

    def build_cost(self, network: Network) -> QuadraticCost:
        w = self.cost_weights or tuple(1.0 for _ in network.gen_ids)
        if len(w) != network.n_gen:
            raise ScenarioError("one cost weight per generator is required")
        return QuadraticCost(np.asarray(w, dtype=float))

    def build_gains(self, network: Network, comm: CommGraph) -> ControllerGains:
        return ControllerGains.uniform(self.gain_p, self.gain_price,
                                       self.gain_flow, network.n_gen,
                                       network.n_nodes, comm.n_edges)

    def p_load_vector(self, network: Network) -> np.ndarray:
        vec = np.zeros(network.n_nodes)
        for nid, val in self.p_load.items():
            vec[network.node_index(nid)] = val
        return vec

    def q_load_vector(self, network: Network) -> np.ndarray:
        vec = np.zeros(network.n_load)
        for nid, val in self.q_load.items():
            if nid not in network.load_ids:
                raise ScenarioError(f"reactive demand on non-load node {nid}")
            vec[network.load_ids.index(nid)] = val
        return vec

    def u_field_vector(self, network: Network) -> np.ndarray | None:
        if self.u_field is None:
            return None
        return np.array([self.u_field[i] for i in network.gen_ids], dtype=float)

    def validate_against_network(self) -> None:
        """Check that events reference existing nodes/edges."""
        net = self.build_network()
        comm = self.build_comm(net)
        for ev in self.events:
            if isinstance(ev, StepLoad) and ev.node not in net.node_ids:
                raise ScenarioError(f"step load on unknown node {ev.node}")
            if isinstance(ev, ClockDrift) and ev.node not in net.gen_ids:
                raise ScenarioError(
                    f"clock drift on non-generator node {ev.node}")
            if isinstance(ev, CommEdgeFail):
                lo, hi = sorted(ev.edge)
                if (lo, hi) not in comm.edges:
                    raise ScenarioError(
                        f"communication edge ({lo}, {hi}) does not exist")

    def with_updates(self, **kwargs) -> "Scenario":
        return replace(self, **kwargs)


# -- strict YAML parsing ---------------------------------------------------

_NODE_KEYS_GEN = {"id", "kind", "damping", "b_shunt", "inertia", "xd",
                  "xd_transient", "tau_voltage"}
_NODE_KEYS_LOAD = {"id", "kind", "damping", "b_shunt"}
_LINE_KEYS = {"from", "to", "b"}
_NETWORK_KEYS = {"eta", "nodes", "lines"}
_SCENARIO_KEYS = {"name", "network", "eta", "communication", "mode",
                  "cost_weights", "gains", "loads", "excitation", "horizon",
                  "integrator", "events"}
_GAIN_KEYS = {"p_gen", "price", "flow"}
_LOAD_KEYS = {"p", "q"}
_EXCITATION_KEYS = {"voltage_target", "values"}
_INTEGRATOR_KEYS = {"step", "output_every", "newton_tol", "max_newton",
                    "scheme", "omega_max", "volt_min"}
_EVENT_KEYS = {
    "step_load": {"type", "t", "node", "delta_p"},
    "clock_drift": {"type", "node", "offset_hz", "from_t"},
    "comm_edge_fail": {"type", "t", "edge"},
}


def _require_keys(mapping: dict, allowed: set, context: str) -> None:
    if not isinstance(mapping, dict):
        raise ScenarioError(f"{context} must be a mapping")
    unknown = set(mapping) - allowed
    if unknown:
        raise ScenarioError(
            f"unknown key(s) in {context}: {', '.join(sorted(map(str, unknown)))}")


def parse_network_block(data: dict) -> tuple[dict, float]:
    """Validate a network mapping; returns (raw_topology, eta)."""
    _require_keys(data, _NETWORK_KEYS, "network")
    for key in ("nodes", "lines"):
        if key not in data:
            raise ScenarioError(f"network is missing {key!r}")
    nodes = []
    for nd in data["nodes"]:
        kind = nd.get("kind")
        if kind == "generator":
            _require_keys(nd, _NODE_KEYS_GEN, f"node {nd.get('id')}")
            missing = _NODE_KEYS_GEN - set(nd)
        elif kind == "load":
            _require_keys(nd, _NODE_KEYS_LOAD, f"node {nd.get('id')}")
            missing = _NODE_KEYS_LOAD - set(nd)
        else:
            raise ScenarioError(f"node kind must be generator or load, got {kind!r}")
        if missing:
            raise ScenarioError(
                f"node {nd.get('id')} is missing {', '.join(sorted(missing))}")
        nodes.append(dict(nd))
    lines = []
    for ln in data["lines"]:
        _require_keys(ln, _LINE_KEYS, "line")
        if _LINE_KEYS - set(ln):
            raise ScenarioError("every line needs from, to and b")
        lines.append(dict(ln))
    return {"nodes": nodes, "lines": lines}, float(data.get("eta", 0.0))


def load_network_file(path: str | Path) -> tuple[dict, float]:
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    return parse_network_block(data)


_EVENT_OPTIONAL = {"step_load": set(), "clock_drift": {"from_t"},
                   "comm_edge_fail": set()}


def _parse_event(raw: dict) -> Event:
    kind = raw.get("type")
    if kind not in _EVENT_KEYS:
        raise ScenarioError(f"unknown event type {kind!r}")
    _require_keys(raw, _EVENT_KEYS[kind], f"{kind} event")
    missing = _EVENT_KEYS[kind] - _EVENT_OPTIONAL[kind] - set(raw)
    if missing:
        raise ScenarioError(
            f"{kind} event is missing {', '.join(sorted(missing))}")
    if kind == "step_load":
        return StepLoad(t=float(raw["t"]), node=int(raw["node"]),
                        delta_p=float(raw["delta_p"]))
    if kind == "clock_drift":
        return ClockDrift(node=int(raw["node"]),
                          offset_hz=float(raw["offset_hz"]),
                          from_t=float(raw.get("from_t", 0.0)))
    return CommEdgeFail(t=float(raw["t"]),
                        edge=tuple(int(v) for v in raw["edge"]))


def parse_scenario(data: dict, *, base_dir: Path | None = None) -> Scenario:
    """Build a :class:`Scenario` from already-loaded YAML data."""
    _require_keys(data, _SCENARIO_KEYS, "scenario")
    if "network" not in data:
        raise ScenarioError("scenario is missing the network")

    net_entry = data["network"]
    if isinstance(net_entry, str):
        net_path = Path(net_entry)
        if base_dir is not None and not net_path.is_absolute():
            net_path = base_dir / net_path
        raw_topology, eta = load_network_file(net_path)
    else:
        raw_topology, eta = parse_network_block(net_entry)
    if "eta" in data:
        eta = float(data["eta"])

    comm = data.get("communication", "physical")
    if isinstance(comm, dict):
        _require_keys(comm, {"edges"}, "communication")
        comm = tuple((int(i), int(j)) for i, j in comm["edges"])
    elif comm not in COMM_KINDS:
        raise ScenarioError(f"unknown communication topology {comm!r}")

    gains = data.get("gains", {})
    _require_keys(gains, _GAIN_KEYS, "gains")
    loads = data.get("loads", {})
    _require_keys(loads, _LOAD_KEYS, "loads")
    p_load = {int(k): float(v) for k, v in (loads.get("p") or {}).items()}
    q_load = {int(k): float(v) for k, v in (loads.get("q") or {}).items()}

    excitation = data.get("excitation", {"voltage_target": 1.0})
    _require_keys(excitation, _EXCITATION_KEYS, "excitation")
    if ("voltage_target" in excitation) == ("values" in excitation):
        raise ScenarioError(
            "excitation needs exactly one of voltage_target / values")
    voltage_target = excitation.get("voltage_target")
    u_field = excitation.get("values")
    if u_field is not None:
        u_field = {int(k): float(v) for k, v in u_field.items()}

    integ = data.get("integrator", {})
    _require_keys(integ, _INTEGRATOR_KEYS, "integrator")

    events = tuple(_parse_event(ev) for ev in data.get("events", []))

    weights = data.get("cost_weights", ())
    scenario = Scenario(
        network=raw_topology,
        eta=eta,
        communication=comm,
        mode=data.get("mode", "lossy"),
        cost_weights=tuple(float(w) for w in weights),
        gain_p=float(gains.get("p_gen", 1.0)),
        gain_price=float(gains.get("price", 1.0)),
        gain_flow=float(gains.get("flow", 1.0)),
        p_load=p_load,
        q_load=q_load,
        voltage_target=None if voltage_target is None else float(voltage_target),
        u_field=u_field,
        horizon=float(data.get("horizon", 90.0)),
        integrator=IntegratorConfig(**{k: v for k, v in integ.items()}),
        events=events,
        name=str(data.get("name", "")),
    )
    scenario.validate_against_network()
    return scenario


def load_scenario(path: str | Path) -> Scenario:
    """Load and validate a scenario file."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ScenarioError("scenario file must hold a mapping")
    return parse_scenario(data, base_dir=path.parent)


def scenario_to_dict(scenario: Scenario) -> dict:
    """Inverse of :func:`parse_scenario`, for writing scenario files."""
    events = []
    for ev in scenario.events:
        if isinstance(ev, StepLoad):
            events.append({"type": "step_load", "t": ev.t, "node": ev.node,
                           "delta_p": ev.delta_p})
        elif isinstance(ev, ClockDrift):
            events.append({"type": "clock_drift", "node": ev.node,
                           "offset_hz": ev.offset_hz, "from_t": ev.from_t})
        else:
            events.append({"type": "comm_edge_fail", "t": ev.t,
                           "edge": list(ev.edge)})
    comm = scenario.communication
    if not isinstance(comm, str):
        comm = {"edges": [list(e) for e in comm]}
    if scenario.voltage_target is not None:
        excitation = {"voltage_target": scenario.voltage_target}
    else:
        excitation = {"values": dict(scenario.u_field)}
    return {
        "name": scenario.name,
        "network": {"eta": scenario.eta, "nodes": scenario.network["nodes"],
                    "lines": scenario.network["lines"]},
        "communication": comm,
        "mode": scenario.mode,
        "cost_weights": list(scenario.cost_weights),
        "gains": {"p_gen": scenario.gain_p, "price": scenario.gain_price,
                  "flow": scenario.gain_flow},
        "loads": {"p": dict(scenario.p_load), "q": dict(scenario.q_load)},
        "excitation": excitation,
        "horizon": scenario.horizon,
        "integrator": {
            "step": scenario.integrator.step,
            "output_every": scenario.integrator.output_every,
            "newton_tol": scenario.integrator.newton_tol,
            "max_newton": scenario.integrator.max_newton,
        },
        "events": events,
    }


def save_scenario(scenario: Scenario, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(scenario_to_dict(scenario), fh, sort_keys=False)
