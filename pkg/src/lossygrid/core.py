"""Physical grid model: topology, lossy AC power flow, stored energy and its
gradient, and the open-loop dynamic/algebraic residuals.

Conventions used throughout the package:

* Nodes are ordered generators first, then loads.  All per-node arrays
  follow that order; per-generator and per-load arrays follow the order of
  ``Network.gen_ids`` / ``Network.load_ids``.
* Every line is oriented from its lower to its higher node id and the edge
  angle ``theta_diff[e]`` is the phase difference along that orientation.
* Line susceptance entries ``b_line`` are positive and conductance entries
  ``g_line`` are nonpositive (resistive-inductive lines).  Nodal shunt
  entries ``b_shunt`` come straight from the node table and are typically
  negative; they enter the reactive flow as ``-b_shunt * U**2`` and the
  stored energy as ``-b_shunt * U**2 / 2``.
* Frequencies are per-unit deviations from the 50 Hz nominal; time is in
  seconds, every other quantity is per-unit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

NOMINAL_HZ = 50.0
OMEGA_NOMINAL = 2.0 * math.pi * NOMINAL_HZ

# Voltages below this are outside model validity; integration aborts there.
VOLTAGE_FLOOR = 0.2


class TopologyError(ValueError):
    """Raised for malformed network descriptions."""


class SingularStateError(ValueError):
    """Raised when a state has (numerically) zero generator voltage."""


def _frozen_array(values, dtype=float) -> np.ndarray:
    arr = np.asarray(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Network:
    """Immutable grid topology with per-unit admittance data.

    ``gen_ids`` and ``load_ids`` keep the declared node order; ``edges``
    keeps the declared line order with endpoints normalized to
    (lower id, higher id).
    """

    gen_ids: tuple[int, ...]
    load_ids: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]
    b_line: np.ndarray
    g_line: np.ndarray
    b_shunt: np.ndarray
    g_shunt: np.ndarray
    # Endpoint positions of each edge in node order, derived in build_network.
    edge_from: np.ndarray = field(repr=False, default=None)
    edge_to: np.ndarray = field(repr=False, default=None)

    @property
    def n_gen(self) -> int:
        return len(self.gen_ids)

    @property
    def n_load(self) -> int:
        return len(self.load_ids)

    @property
    def n_nodes(self) -> int:
        return self.n_gen + self.n_load

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def node_ids(self) -> tuple[int, ...]:
        return self.gen_ids + self.load_ids

    def node_index(self, node_id: int) -> int:
        return self.node_ids.index(node_id)

    def incidence(self) -> np.ndarray:
        """Node-edge incidence matrix (+1 at the lower-id endpoint)."""
        d = np.zeros((self.n_nodes, self.n_edges))
        d[self.edge_from, np.arange(self.n_edges)] = 1.0
        d[self.edge_to, np.arange(self.n_edges)] = -1.0
        return d

    def incidence_gen(self) -> np.ndarray:
        return self.incidence()[: self.n_gen]

    def incidence_load(self) -> np.ndarray:
        return self.incidence()[self.n_gen :]


@dataclass(frozen=True)
class GeneratorParams:
    """Per-generator machine constants, aligned with ``Network.gen_ids``."""

    inertia: np.ndarray        # p.u. * s^2, > 0
    damping: np.ndarray        # p.u., > 0
    xd: np.ndarray             # synchronous reactance, p.u.
    xd_transient: np.ndarray   # transient reactance, p.u., < xd
    tau_voltage: np.ndarray    # open-circuit time constant, s

    def __post_init__(self):
        for name in ("inertia", "damping", "xd", "xd_transient", "tau_voltage"):
            object.__setattr__(self, name, _frozen_array(getattr(self, name)))
        if np.any(self.inertia <= 0) or np.any(self.damping <= 0):
            raise ValueError("generator inertia and damping must be positive")
        if np.any(self.tau_voltage <= 0):
            raise ValueError("voltage time constants must be positive")
        if np.any(self.xd_transient <= 0) or np.any(self.xd <= self.xd_transient):
            raise ValueError("reactances must satisfy xd > xd_transient > 0")

    @property
    def xd_gap(self) -> np.ndarray:
        """Difference between synchronous and transient reactance."""
        return self.xd - self.xd_transient

    @property
    def voltage_dissipation(self) -> np.ndarray:
        """Damping coefficient of the voltage channel, xd_gap / tau."""
        return self.xd_gap / self.tau_voltage


@dataclass(frozen=True)
class LoadParams:
    """Per-load frequency damping, aligned with ``Network.load_ids``.

    Strictly positive damping is required: the load frequency is recovered
    from its balance equation by dividing by the damping coefficient, which
    is what keeps the system an index-1 DAE.
    """

    damping: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "damping", _frozen_array(self.damping))
        if np.any(self.damping <= 0):
            raise ValueError("load damping must be strictly positive")


@dataclass(frozen=True)
class PlantParams:
    gen: GeneratorParams
    load: LoadParams


@dataclass
class PlantState:
    """Grid state: edge angles, momenta, generator voltages (differential)
    plus load frequencies and load voltages (algebraic)."""

    theta_diff: np.ndarray   # per edge, rad
    momentum: np.ndarray     # per generator, p.u. deviation
    volt_g: np.ndarray       # per generator, p.u.
    freq_l: np.ndarray       # per load, p.u. deviation
    volt_l: np.ndarray       # per load, p.u.

    def __post_init__(self):
        self.theta_diff = np.asarray(self.theta_diff, dtype=float)
        self.momentum = np.asarray(self.momentum, dtype=float)
        self.volt_g = np.asarray(self.volt_g, dtype=float)
        self.freq_l = np.asarray(self.freq_l, dtype=float)
        self.volt_l = np.asarray(self.volt_l, dtype=float)

    def voltages(self) -> np.ndarray:
        """All node voltages in node order."""
        return np.concatenate([self.volt_g, self.volt_l])

    def copy(self) -> "PlantState":
        return PlantState(
            self.theta_diff.copy(), self.momentum.copy(), self.volt_g.copy(),
            self.freq_l.copy(), self.volt_l.copy(),
        )


@dataclass
class PlantInput:
    """Exogenous plant inputs: controllable injections, excitation voltages,
    and (uncontrollable) demands."""

    p_gen: np.ndarray    # per generator
    u_field: np.ndarray  # per generator, > 0
    q_load: np.ndarray   # per load node
    p_load: np.ndarray   # per node (all nodes)

    def __post_init__(self):
        self.p_gen = np.asarray(self.p_gen, dtype=float)
        self.u_field = np.asarray(self.u_field, dtype=float)
        self.q_load = np.asarray(self.q_load, dtype=float)
        self.p_load = np.asarray(self.p_load, dtype=float)

    def copy(self) -> "PlantInput":
        return PlantInput(self.p_gen.copy(), self.u_field.copy(),
                          self.q_load.copy(), self.p_load.copy())


@dataclass
class PlantCostate:
    """Gradient of the stored energy, block by block."""

    d_theta: np.ndarray
    d_momentum: np.ndarray   # equals the generator frequency deviations
    d_volt_g: np.ndarray
    d_freq_l: np.ndarray
    d_volt_l: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.d_theta, self.d_momentum, self.d_volt_g,
                               self.d_freq_l, self.d_volt_l])


def build_network(raw_topology: dict, eta: float, *,
                  extra_shunt_g=None) -> Network:
    """Build a :class:`Network` from a plain topology description.

    ``raw_topology`` holds ``nodes`` (list of dicts with ``id``, ``kind`` in
    {"generator", "load"} and ``b_shunt``) and ``lines`` (list of dicts with
    ``from``, ``to`` and positive ``b``).  Line conductances follow the
    constant R/X ratio: ``g = -eta * b``.  Nodal shunt conductances are set
    to ``-sum of incident g`` plus an optional extra term (default zero), so
    a flat voltage profile at zero angles dissipates nothing.
    """
    if eta < 0:
        raise ValueError("R/X ratio must be nonnegative")
    nodes = raw_topology["nodes"]
    lines = raw_topology["lines"]

    gen_ids = tuple(n["id"] for n in nodes if n["kind"] == "generator")
    load_ids = tuple(n["id"] for n in nodes if n["kind"] == "load")
    all_ids = gen_ids + load_ids
    if len(set(all_ids)) != len(all_ids):
        raise TopologyError("duplicate node ids")
    index = {nid: k for k, nid in enumerate(all_ids)}

    edges = []
    b_line = []
    seen = set()
    for ln in lines:
        i, j = ln["from"], ln["to"]
        if i == j:
            raise TopologyError(f"self-loop at node {i}")
        if i not in index or j not in index:
            raise TopologyError(f"line references unknown node: ({i}, {j})")
        lo, hi = (i, j) if i < j else (j, i)
        if (lo, hi) in seen:
            raise TopologyError(f"duplicate line ({lo}, {hi})")
        seen.add((lo, hi))
        b = float(ln["b"])
        if b <= 0:
            raise TopologyError(f"line ({lo}, {hi}) needs positive susceptance")
        edges.append((lo, hi))
        b_line.append(b)

    b_line = np.asarray(b_line)
    g_line = -eta * b_line

    n = len(all_ids)
    m = len(edges)
    edge_from = np.array([index[i] for i, _ in edges], dtype=np.int64)
    edge_to = np.array([index[j] for _, j in edges], dtype=np.int64)

    # Connectivity via union-find over the edge list.
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a, b in zip(edge_from, edge_to):
        parent[find(a)] = find(b)
    if n > 1 and len({find(k) for k in range(n)}) != 1:
        raise TopologyError("physical graph is not connected")

    b_shunt = np.zeros(n)
    for nd in nodes:
        b_shunt[index[nd["id"]]] = float(nd["b_shunt"])

    g_shunt = np.zeros(n)
    np.add.at(g_shunt, edge_from, -g_line)
    np.add.at(g_shunt, edge_to, -g_line)
    if extra_shunt_g is not None:
        g_shunt = g_shunt + np.asarray(extra_shunt_g, dtype=float)

    return Network(
        gen_ids=gen_ids,
        load_ids=load_ids,
        edges=tuple(edges),
        b_line=_frozen_array(b_line),
        g_line=_frozen_array(g_line),
        b_shunt=_frozen_array(b_shunt),
        g_shunt=_frozen_array(g_shunt),
        edge_from=_frozen_array(edge_from, dtype=np.int64),
        edge_to=_frozen_array(edge_to, dtype=np.int64),
    )


def cycle_residual(theta_diff: np.ndarray, network: Network) -> float:
    """Distance of an edge-angle vector from the range of the transposed
    incidence matrix (zero iff some nodal angle vector generates it)."""
    d = network.incidence()
    sol, *_ = np.linalg.lstsq(d.T, theta_diff, rcond=None)
    return float(np.max(np.abs(d.T @ sol - theta_diff))) if len(theta_diff) else 0.0


def _edge_terms(theta_diff, volts, network: Network):
    """Per-edge trig products shared by flows, energy and gradients."""
    ui = volts[network.edge_from]
    uj = volts[network.edge_to]
    s = np.sin(theta_diff)
    c = np.cos(theta_diff)
    return ui, uj, s, c


def _scatter(network: Network, at_from, at_to):
    out = np.zeros(network.n_nodes)
    np.add.at(out, network.edge_from, at_from)
    np.add.at(out, network.edge_to, at_to)
    return out


def power_flows(theta_diff, volts, network: Network):
    """Sending-end active and reactive power at every node.

    Active:   p_i = G_ii U_i^2 + sum_j U_i U_j (B_ij sin + G_ij cos)
    Reactive: q_i = -B_ii U_i^2 + sum_j U_i U_j (G_ij sin - B_ij cos)

    The shunt term enters q with a minus sign (standard admittance-matrix
    form); the node table lists negative B_ii, so the contribution is
    positive.  Edge orientation is handled so the angle seen from the far
    end is the negative of the stored edge angle.
    """
    theta_diff = np.asarray(theta_diff, dtype=float)
    volts = np.asarray(volts, dtype=float)
    ui, uj, s, c = _edge_terms(theta_diff, volts, network)
    b_sin = network.b_line * ui * uj * s
    g_sin = network.g_line * ui * uj * s
    b_cos = network.b_line * ui * uj * c
    g_cos = network.g_line * ui * uj * c

    p = network.g_shunt * volts**2 + _scatter(network, b_sin + g_cos, -b_sin + g_cos)
    q = -network.b_shunt * volts**2 + _scatter(network, g_sin - b_cos, -g_sin - b_cos)
    return p, q


def conductance_terms(theta_diff, volts, network: Network,
                      gen_params: GeneratorParams):
    """Conductance-driven pieces of the flows, split for the dynamics.

    Returns ``(phi_g, phi_l, rho_g, rho_l)`` where phi is the cosine part
    of the active power per node (generators / loads) and rho is the sine
    part of the reactive power: per unit voltage and scaled by the voltage
    dissipation coefficient for generators, the full product for loads.
    """
    theta_diff = np.asarray(theta_diff, dtype=float)
    volts = np.asarray(volts, dtype=float)
    ui, uj, s, c = _edge_terms(theta_diff, volts, network)
    g_cos = network.g_line * ui * uj * c
    phi = network.g_shunt * volts**2 + _scatter(network, g_cos, g_cos)
    # sum_j G_ij U_j sin(angle seen from the node), without the local U_i
    g_sin_per_u = _scatter(network, network.g_line * uj * s,
                           -network.g_line * ui * s)
    ng = network.n_gen
    phi_g, phi_l = phi[:ng], phi[ng:]
    rho_g = gen_params.voltage_dissipation * g_sin_per_u[:ng]
    rho_l = volts[ng:] * g_sin_per_u[ng:]
    return phi_g, phi_l, rho_g, rho_l


def plant_hamiltonian(state: PlantState, network: Network,
                      params: PlantParams) -> float:
    """Stored energy: rotor and field energy, line magnetic energy, and the
    quadratic load-frequency penalty."""
    volts = state.voltages()
    ui, uj, _, c = _edge_terms(state.theta_diff, volts, network)
    rotor = 0.5 * np.sum(state.momentum**2 / params.gen.inertia)
    fld = 0.5 * np.sum(state.volt_g**2 / params.gen.xd_gap)
    shunt = -0.5 * np.sum(network.b_shunt * volts**2)
    coupling = -np.sum(network.b_line * ui * uj * c)
    loads = 0.5 * np.sum(state.freq_l**2)
    return float(rotor + fld + shunt + coupling + loads)


def plant_gradient(state: PlantState, network: Network,
                   params: PlantParams) -> PlantCostate:
    """Analytic gradient of :func:`plant_hamiltonian`."""
    volts = state.voltages()
    ui, uj, s, c = _edge_terms(state.theta_diff, volts, network)
    d_theta = network.b_line * ui * uj * s
    # -B_ii U_i - sum_j B_ij U_j cos(theta_ij), voltage channel per node
    b_cos_per_u = _scatter(network, network.b_line * uj * c,
                           network.b_line * ui * c)
    d_volt = -network.b_shunt * volts - b_cos_per_u
    ng = network.n_gen
    d_volt_g = state.volt_g / params.gen.xd_gap + d_volt[:ng]
    return PlantCostate(
        d_theta=d_theta,
        d_momentum=state.momentum / params.gen.inertia,
        d_volt_g=d_volt_g,
        d_freq_l=state.freq_l.copy(),
        d_volt_l=d_volt[ng:],
    )


def node_frequencies(state: PlantState, network: Network,
                     params: PlantParams) -> np.ndarray:
    """Per-node frequency deviations in node order (p.u.)."""
    return np.concatenate([state.momentum / params.gen.inertia, state.freq_l])


def plant_residuals(state: PlantState, inp: PlantInput, network: Network,
                    params: PlantParams):
    """Open-loop dynamics, coded directly from the nodal balance equations.

    Returns ``((theta_dot, momentum_dot, volt_g_dot), g_alg)`` where
    ``g_alg`` stacks the load frequency balances followed by the load
    reactive balances.  Raises :class:`SingularStateError` for vanishing
    generator voltage (the voltage equation divides by it).
    """
    if np.any(np.abs(state.volt_g) < 1e-12):
        raise SingularStateError("generator voltage is numerically zero")
    ng = network.n_gen
    omega = node_frequencies(state, network, params)
    p, q = power_flows(state.theta_diff, state.voltages(), network)

    theta_dot = omega[network.edge_from] - omega[network.edge_to]
    momentum_dot = (-params.gen.damping * omega[:ng] + inp.p_gen
                    - inp.p_load[:ng] - p[:ng])
    volt_g_dot = (inp.u_field - state.volt_g
                  - params.gen.xd_gap * q[:ng] / state.volt_g) / params.gen.tau_voltage
    g_freq = -params.load.damping * state.freq_l - inp.p_load[ng:] - p[ng:]
    g_volt = -inp.q_load - q[ng:]
    return (theta_dot, momentum_dot, volt_g_dot), np.concatenate([g_freq, g_volt])


def plant_structure(state: PlantState, network: Network, params: PlantParams):
    """Interconnection and dissipation matrices of the open-loop form.

    Row/column blocks: edge angles, momenta, generator voltages, load
    frequencies, load voltages.  The interconnection part is built from the
    incidence split only and is exactly skew-symmetric; the dissipation part
    is diagonal and state-dependent through the load voltages.
    """
    m, ng, nl = network.n_edges, network.n_gen, network.n_load
    n_rows = m + 2 * ng + 2 * nl
    j = np.zeros((n_rows, n_rows))
    d = network.incidence()
    sl_th = slice(0, m)
    sl_l = slice(m, m + ng)
    sl_wl = slice(m + 2 * ng, m + 2 * ng + nl)
    j[sl_th, sl_l] = d[:ng].T
    j[sl_l, sl_th] = -d[:ng]
    j[sl_th, sl_wl] = d[ng:].T
    j[sl_wl, sl_th] = -d[ng:]

    r = np.zeros(n_rows)
    r[sl_l] = params.gen.damping
    r[m + ng : m + 2 * ng] = params.gen.voltage_dissipation
    r[sl_wl] = params.load.damping
    r[m + 2 * ng + nl :] = state.volt_l
    return j, np.diag(r)


def plant_residuals_matrix(state: PlantState, inp: PlantInput,
                           network: Network, params: PlantParams):
    """Open-loop dynamics assembled from the structured matrix form
    ``(J - R) grad H - r + G u``; must agree with :func:`plant_residuals`
    to machine precision (cross-checked in the test suite).
    """
    m, ng, nl = network.n_edges, network.n_gen, network.n_load
    j, r_mat = plant_structure(state, network, params)
    z = plant_gradient(state, network, params).as_vector()
    phi_g, phi_l, rho_g, rho_l = conductance_terms(
        state.theta_diff, state.voltages(), network, params.gen)
    r_vec = np.concatenate([np.zeros(m), phi_g, rho_g, phi_l, rho_l])

    forcing = np.zeros(m + 2 * ng + 2 * nl)
    forcing[m : m + ng] = inp.p_gen - inp.p_load[:ng]
    forcing[m + ng : m + 2 * ng] = inp.u_field / params.gen.tau_voltage
    forcing[m + 2 * ng : m + 2 * ng + nl] = -inp.p_load[ng:]
    forcing[m + 2 * ng + nl :] = -inp.q_load

    rhs = (j - r_mat) @ z - r_vec + forcing
    k = m + 2 * ng
    return (rhs[:m], rhs[m : m + ng], rhs[m + ng : k]), rhs[k:]
