"""Distributed price controller: neighbor-to-neighbor consensus on a nodal
price, virtual power flows on the communication graph, and gradient play on
the generator injections.

The controller state is stored as plain ``(p_gen, price, flow)``; the time
constants divide the right-hand side instead of scaling the state, so gain
changes never require rescaling stored trajectories.  A cross-check against
the gain-scaled energy formulation is part of the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Network, _frozen_array


class CommTopologyError(ValueError):
    """Raised for malformed communication graphs."""


@dataclass(frozen=True)
class CommGraph:
    """Communication graph over all nodes, as an oriented edge list."""

    node_ids: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]
    edge_from: np.ndarray
    edge_to: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def incidence(self) -> np.ndarray:
        d = np.zeros((self.n_nodes, self.n_edges))
        d[self.edge_from, np.arange(self.n_edges)] = 1.0
        d[self.edge_to, np.arange(self.n_edges)] = -1.0
        return d

    def neighbors(self, pos: int) -> set[int]:
        out = set()
        for a, b in zip(self.edge_from, self.edge_to):
            if a == pos:
                out.add(int(b))
            elif b == pos:
                out.add(int(a))
        return out


def comm_graph_from_edges(node_ids, edges) -> CommGraph:
    """Build a communication graph from explicit node-id pairs.

    The graph must span all nodes and be connected; otherwise the steady
    prices would not be forced to a single value.
    """
    node_ids = tuple(node_ids)
    index = {nid: k for k, nid in enumerate(node_ids)}
    norm = []
    seen = set()
    for i, j in edges:
        if i == j:
            raise CommTopologyError(f"self-loop at node {i}")
        if i not in index or j not in index:
            raise CommTopologyError(f"edge references unknown node: ({i}, {j})")
        lo, hi = (i, j) if i < j else (j, i)
        if (lo, hi) in seen:
            raise CommTopologyError(f"duplicate communication edge ({lo}, {hi})")
        seen.add((lo, hi))
        norm.append((lo, hi))

    parent = list(range(len(node_ids)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in norm:
        parent[find(index[i])] = find(index[j])
    if len(node_ids) > 1 and len({find(k) for k in range(len(node_ids))}) != 1:
        raise CommTopologyError("communication graph is not connected")

    return CommGraph(
        node_ids=node_ids,
        edges=tuple(norm),
        edge_from=_frozen_array([index[i] for i, _ in norm], dtype=np.int64),
        edge_to=_frozen_array([index[j] for _, j in norm], dtype=np.int64),
    )


COMM_KINDS = ("complete", "physical", "ring", "open_ring")


def build_comm_topology(kind: str, network: Network) -> CommGraph:
    """Standard communication topologies over the grid's node set.

    ``complete`` links every node pair, ``physical`` copies the grid lines,
    ``ring`` is the cycle through ascending node ids, and ``open_ring`` is
    that ring without its closing edge.
    """
    ids = network.node_ids
    ordered = sorted(ids)
    if kind == "complete":
        edges = [(a, b) for k, a in enumerate(ordered) for b in ordered[k + 1:]]
    elif kind == "physical":
        edges = list(network.edges)
    elif kind == "ring":
        edges = [(ordered[k], ordered[(k + 1) % len(ordered)])
                 for k in range(len(ordered))]
    elif kind == "open_ring":
        edges = [(ordered[k], ordered[k + 1]) for k in range(len(ordered) - 1)]
    else:
        raise CommTopologyError(f"unknown communication topology {kind!r}")
    return comm_graph_from_edges(ids, edges)


@dataclass(frozen=True)
class QuadraticCost:
    """Weighted sum-of-squares generation cost, 0.5 * sum p_i^2 / w_i.

    Equal marginal prices then mean injections proportional to the weights,
    i.e. active power sharing.
    """

    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights", _frozen_array(self.weights))
        if np.any(self.weights <= 0):
            raise ValueError("cost weights must be positive")

    def value(self, p_gen) -> float:
        p_gen = np.asarray(p_gen, dtype=float)
        return float(0.5 * np.sum(p_gen**2 / self.weights))

    def gradient(self, p_gen) -> np.ndarray:
        return np.asarray(p_gen, dtype=float) / self.weights


def cost_gradient(cost, p_gen) -> np.ndarray:
    """Marginal price of each generator at the given injection."""
    return np.asarray(cost.gradient(p_gen), dtype=float)


@dataclass
class ControllerState:
    p_gen: np.ndarray   # per generator
    price: np.ndarray   # per node
    flow: np.ndarray    # per communication edge

    def __post_init__(self):
        self.p_gen = np.asarray(self.p_gen, dtype=float)
        self.price = np.asarray(self.price, dtype=float)
        self.flow = np.asarray(self.flow, dtype=float)

    def copy(self) -> "ControllerState":
        return ControllerState(self.p_gen.copy(), self.price.copy(),
                               self.flow.copy())


@dataclass(frozen=True)
class ControllerGains:
    """Positive time constants of the three controller channels."""

    p_gen: np.ndarray
    price: np.ndarray
    flow: np.ndarray

    def __post_init__(self):
        for name in ("p_gen", "price", "flow"):
            object.__setattr__(self, name, _frozen_array(getattr(self, name)))
            if np.any(getattr(self, name) <= 0):
                raise ValueError("controller gains must be positive")

    @staticmethod
    def uniform(value_p: float, value_price: float, value_flow: float,
                n_gen: int, n_nodes: int, n_comm: int) -> "ControllerGains":
        return ControllerGains(np.full(n_gen, value_p),
                               np.full(n_nodes, value_price),
                               np.full(n_comm, value_flow))


def controller_rhs(state: ControllerState, omega_meas: np.ndarray,
                   p_load: np.ndarray, phi: np.ndarray, comm: CommGraph,
                   gains: ControllerGains, cost, mode: str = "lossy",
                   edge_active: np.ndarray | None = None) -> ControllerState:
    """Time derivatives of the controller state.

    ``omega_meas`` is the measured generator frequency deviation (enters
    with a minus sign, the power-preserving coupling to the grid).  ``phi``
    is the per-node conductance term; in ``lossless`` mode it is ignored,
    which reproduces the prior controller that leaves line losses
    unaccounted.  ``edge_active`` masks failed communication edges.
    """
    if mode not in ("lossy", "lossless"):
        raise ValueError(f"unknown controller mode {mode!r}")
    ng = len(state.p_gen)
    n = len(state.price)
    if len(omega_meas) != ng or len(p_load) != n or len(phi) != n:
        raise ValueError("controller input dimensions are inconsistent")
    if comm.n_edges != len(state.flow):
        raise ValueError("virtual flow dimension does not match the graph")

    flow = state.flow if edge_active is None else state.flow * edge_active
    d_price_flow = np.zeros(n)
    np.add.at(d_price_flow, comm.edge_from, flow)
    np.add.at(d_price_flow, comm.edge_to, -flow)

    dp = (-cost_gradient(cost, state.p_gen) + state.price[:ng] - omega_meas
          ) / gains.p_gen
    balance = d_price_flow.copy()
    balance[:ng] -= state.p_gen
    balance += p_load
    if mode == "lossy":
        balance += phi
    dprice = balance / gains.price

    dflow = -(state.price[comm.edge_from] - state.price[comm.edge_to])
    if edge_active is not None:
        dflow = dflow * edge_active
    dflow = dflow / gains.flow
    return ControllerState(dp, dprice, dflow)


def controller_rhs_pernode(state: ControllerState, omega_meas, p_load, phi,
                           comm: CommGraph, gains: ControllerGains, cost,
                           mode: str = "lossy") -> ControllerState:
    """Node-by-node evaluation of :func:`controller_rhs`.

    Each node's update touches only its own variables and those of adjacent
    communication edges; used to demonstrate the distributed structure.
    """
    ng = len(state.p_gen)
    n = len(state.price)
    grad = cost_gradient(cost, state.p_gen)
    dp = np.zeros(ng)
    dprice = np.zeros(n)
    dflow = np.zeros(comm.n_edges)
    for i in range(n):
        incoming = 0.0
        for e in range(comm.n_edges):
            if comm.edge_from[e] == i:
                incoming += state.flow[e]
            elif comm.edge_to[e] == i:
                incoming -= state.flow[e]
        bal = incoming + p_load[i]
        if i < ng:
            bal -= state.p_gen[i]
            dp[i] = (-grad[i] + state.price[i] - omega_meas[i]) / gains.p_gen[i]
        if mode == "lossy":
            bal += phi[i]
        dprice[i] = bal / gains.price[i]
    for e in range(comm.n_edges):
        dflow[e] = -(state.price[comm.edge_from[e]]
                     - state.price[comm.edge_to[e]]) / gains.flow[e]
    return ControllerState(dp, dprice, dflow)


def controller_structure(comm: CommGraph, n_gen: int) -> np.ndarray:
    """Constant interconnection matrix of the controller in its scaled
    coordinates; exactly skew-symmetric."""
    n = comm.n_nodes
    mc = comm.n_edges
    size = n_gen + n + mc
    j = np.zeros((size, size))
    j[:n_gen, n_gen:2 * n_gen] = np.eye(n_gen)     # price at own node
    j[n_gen:2 * n_gen, :n_gen] = -np.eye(n_gen)
    dc = comm.incidence()
    j[n_gen:n_gen + n, n_gen + n:] = dc
    j[n_gen + n:, n_gen:n_gen + n] = -dc.T
    return j


def controller_rhs_scaled(state: ControllerState, omega_meas, p_load, phi,
                          comm: CommGraph, gains: ControllerGains, cost,
                          mode: str = "lossy") -> np.ndarray:
    """Right-hand side in the gain-scaled coordinates (the energy-based
    formulation); dividing blockwise by the gains must reproduce
    :func:`controller_rhs` exactly."""
    ng = len(state.p_gen)
    j = controller_structure(comm, ng)
    z = np.concatenate([state.p_gen, state.price, state.flow])
    r = np.concatenate([cost_gradient(cost, state.p_gen),
                        -phi if mode == "lossy" else np.zeros(len(phi)),
                        np.zeros(comm.n_edges)])
    u = np.concatenate([-np.asarray(omega_meas, dtype=float), p_load,
                        np.zeros(comm.n_edges)])
    return j @ z - r + u


def kkt_residual(state: ControllerState, p_load, phi, comm: CommGraph, cost):
    """Max-norm residuals of the three optimality conditions: stationarity,
    price consensus, and the distributed power balance."""
    ng = len(state.p_gen)
    stationarity = cost_gradient(cost, state.p_gen) - state.price[:ng]
    consensus = state.price[comm.edge_from] - state.price[comm.edge_to]
    d_flow = np.zeros(comm.n_nodes)
    np.add.at(d_flow, comm.edge_from, state.flow)
    np.add.at(d_flow, comm.edge_to, -state.flow)
    balance = -d_flow + np.concatenate([state.p_gen, np.zeros(comm.n_nodes - ng)]) \
        - p_load - phi
    inf = lambda v: float(np.max(np.abs(v))) if len(v) else 0.0
    return inf(stationarity), inf(consensus), inf(balance)


def economic_dispatch_check(p_gen, cost) -> float:
    """Largest pairwise spread of the marginal prices; zero exactly at the
    dispatch optimum (equivalently, at perfect power sharing for the
    quadratic cost)."""
    grad = cost_gradient(cost, p_gen)
    return float(np.max(grad) - np.min(grad)) if len(grad) else 0.0
