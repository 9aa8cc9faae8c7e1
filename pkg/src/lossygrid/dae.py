"""Time stepping of the closed-loop differential-algebraic system.

The closed loop couples the grid (differential edge angles, momenta and
generator voltages, algebraic load buses) with the price controller through
the measured generator frequencies.  Integration is classic fixed-step
RK4 with a Newton solve of the load-bus equations at every stage; events
split the time mesh so load steps, drifts and communication failures apply
at their exact timestamps.

The hot path runs through the compiled kernels in :mod:`._kernels`; the
NumPy composition of the plant and controller right-hand sides is kept as
the reference the kernels are checked against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .controller import (CommGraph, ControllerGains, ControllerState,
                         QuadraticCost, controller_rhs)
from .core import (Network, PlantInput, PlantParams, PlantState,
                   conductance_terms, node_frequencies, plant_hamiltonian,
                   plant_residuals, power_flows, NOMINAL_HZ)
from .scenario import (ClockDrift, CommEdgeFail, IntegratorConfig, Scenario,
                       StepLoad)

__all__ = [
    "AlgebraicSolveError", "ClosedLoop", "ClosedLoopInputs",
    "ClosedLoopState", "IntegratorConfig", "Trajectory", "simulate",
    "solve_algebraic", "step",
]


class AlgebraicSolveError(RuntimeError):
    """Newton failed on the load-bus equations: the state left the region
    where the algebraic subsystem is solvable (voltage collapse)."""


@dataclass
class ClosedLoopState:
    plant: PlantState
    ctrl: ControllerState

    def copy(self) -> "ClosedLoopState":
        return ClosedLoopState(self.plant.copy(), self.ctrl.copy())


@dataclass
class ClosedLoopInputs:
    """Exogenous closed-loop inputs: demands and excitation voltages."""

    p_load: np.ndarray    # per node
    q_load: np.ndarray    # per load node
    u_field: np.ndarray   # per generator

    def copy(self) -> "ClosedLoopInputs":
        return ClosedLoopInputs(self.p_load.copy(), self.q_load.copy(),
                                self.u_field.copy())


class ClosedLoop:
    """Plant plus controller bundled with the packed arrays the compiled
    kernels need.  Immutable after construction except for the
    communication-edge mask, which events may clear."""

    def __init__(self, network: Network, params: PlantParams, comm: CommGraph,
                 cost, gains: ControllerGains, mode: str = "lossy"):
        if mode not in ("lossy", "lossless"):
            raise ValueError(f"unknown controller mode {mode!r}")
        self.network = network
        self.params = params
        self.comm = comm
        self.cost = cost
        self.gains = gains
        self.mode = mode
        self.edge_active = np.ones(comm.n_edges)

        self._quadratic = isinstance(cost, QuadraticCost)
        self.dims = (network.n_edges, network.n_gen, network.n_load,
                     comm.n_edges)

    # -- packing ----------------------------------------------------------

    @property
    def n_diff(self) -> int:
        m, ng, nl, mc = self.dims
        return m + 3 * ng + (ng + nl) + mc

    @property
    def n_alg(self) -> int:
        return 2 * self.dims[2]

    def pack_state(self, state: ClosedLoopState):
        y = np.concatenate([state.plant.theta_diff, state.plant.momentum,
                            state.plant.volt_g, state.ctrl.p_gen,
                            state.ctrl.price, state.ctrl.flow])
        z = np.concatenate([state.plant.freq_l, state.plant.volt_l])
        return y, z

    def unpack_state(self, y, z) -> ClosedLoopState:
        m, ng, nl, mc = self.dims
        n = ng + nl
        plant = PlantState(
            theta_diff=y[:m].copy(),
            momentum=y[m:m + ng].copy(),
            volt_g=y[m + ng:m + 2 * ng].copy(),
            freq_l=z[:nl].copy(),
            volt_l=z[nl:].copy(),
        )
        ctrl = ControllerState(
            p_gen=y[m + 2 * ng:m + 3 * ng].copy(),
            price=y[m + 3 * ng:m + 3 * ng + n].copy(),
            flow=y[m + 3 * ng + n:].copy(),
        )
        return ClosedLoopState(plant=plant, ctrl=ctrl)

    def _kernel_args(self):
        net, params, comm = self.network, self.params, self.comm
        if not self._quadratic:
            raise NotImplementedError(
                "the compiled path needs the quadratic cost; use the "
                "reference right-hand side for custom costs")
        return (net.edge_from, net.edge_to, net.b_line, net.g_line,
                net.b_shunt, net.g_shunt,
                1.0 / params.gen.inertia, params.gen.damping,
                params.gen.xd_gap, params.gen.tau_voltage,
                params.load.damping, self.cost.weights,
                comm.edge_from, comm.edge_to, self.edge_active,
                self.gains.p_gen, self.gains.price, self.gains.flow,
                self.mode == "lossy")

    def _dims_args(self):
        m, ng, nl, mc = self.dims
        return np.int64(m), np.int64(ng), np.int64(nl), np.int64(mc)

    # -- reference right-hand side ---------------------------------------

    def phi_vector(self, plant: PlantState) -> np.ndarray:
        phi_g, phi_l, _, _ = conductance_terms(
            plant.theta_diff, plant.voltages(), self.network, self.params.gen)
        return np.concatenate([phi_g, phi_l])

    def rhs_reference(self, state: ClosedLoopState, inputs: ClosedLoopInputs,
                      drift: np.ndarray | None = None):
        """Closed-loop derivatives by direct composition of the plant and
        controller right-hand sides with the frequency coupling.

        Returns ``(plant_derivs, ctrl_derivs, g_alg)`` where ``plant_derivs``
        is the (theta, momentum, volt_g) triple.
        """
        ng = self.network.n_gen
        plant_in = PlantInput(p_gen=state.ctrl.p_gen, u_field=inputs.u_field,
                              q_load=inputs.q_load, p_load=inputs.p_load)
        derivs, g_alg = plant_residuals(state.plant, plant_in, self.network,
                                        self.params)
        omega_meas = state.plant.momentum / self.params.gen.inertia
        if drift is not None:
            omega_meas = omega_meas + drift
        ctrl_dot = controller_rhs(
            state.ctrl, omega_meas, inputs.p_load,
            self.phi_vector(state.plant), self.comm, self.gains, self.cost,
            self.mode, edge_active=self.edge_active)
        return derivs, ctrl_dot, g_alg

    def rhs_packed(self, y: np.ndarray, z: np.ndarray,
                   inputs: ClosedLoopInputs,
                   drift: np.ndarray | None = None) -> np.ndarray:
        """Compiled right-hand side on packed arrays (testing hook)."""
        m, ng, nl, mc = self._dims_args()
        if drift is None:
            drift = np.zeros(self.network.n_gen)
        return _kernels._rhs(y, z, *self._kernel_args(),
                             inputs.p_load, inputs.q_load, inputs.u_field,
                             drift, m, ng, nl, mc)

    # -- algebraic consistency -------------------------------------------

    def solve_algebraic(self, state: ClosedLoopState,
                        inputs: ClosedLoopInputs,
                        config: IntegratorConfig | None = None
                        ) -> ClosedLoopState:
        """Return a copy of ``state`` with consistent load buses."""
        config = config or IntegratorConfig()
        freq_l, volt_l = solve_algebraic(
            state.plant.theta_diff, state.plant.volt_g,
            np.concatenate([state.plant.freq_l, state.plant.volt_l]),
            PlantInput(p_gen=state.ctrl.p_gen, u_field=inputs.u_field,
                       q_load=inputs.q_load, p_load=inputs.p_load),
            self.network, self.params,
            tol=config.newton_tol, max_iter=config.max_newton)
        out = state.copy()
        out.plant.freq_l = freq_l
        out.plant.volt_l = volt_l
        return out


def solve_algebraic(theta_diff, volt_g, z_guess, inputs: PlantInput,
                    network: Network, params: PlantParams,
                    tol: float = 1e-10, max_iter: int = 25,
                    return_info: bool = False):
    """Newton solve of the load-bus residuals for (freq_l, volt_l).

    Warm-started from ``z_guess``; converges in one evaluation at a
    consistent point.  Raises :class:`AlgebraicSolveError` when Newton
    stalls, which the integrator interprets as loss of solvability of the
    algebraic subsystem.
    """
    ng = network.n_gen
    nl = network.n_load
    z = np.asarray(z_guess, dtype=float).copy()
    if nl == 0:
        return (z[:0], z[:0], {"iterations": 0}) if return_info else (z[:0], z[:0])
    iterations = 0
    for _ in range(max_iter):
        iterations += 1
        freq_l, volt_l = z[:nl], z[nl:]
        state = PlantState(theta_diff=theta_diff,
                           momentum=np.zeros(ng),
                           volt_g=volt_g, freq_l=freq_l, volt_l=volt_l)
        _, g_alg = plant_residuals(state, inputs, network, params)
        if np.max(np.abs(g_alg)) < tol:
            if return_info:
                return freq_l.copy(), volt_l.copy(), {"iterations": iterations}
            return freq_l.copy(), volt_l.copy()
        jac = _algebraic_jacobian(theta_diff, volt_g, volt_l, network, params)
        try:
            dz = np.linalg.solve(jac, g_alg)
        except np.linalg.LinAlgError as exc:
            raise AlgebraicSolveError(
                "singular load-bus Jacobian (voltage collapse?)") from exc
        z = z - dz
        if not np.all(np.isfinite(z)):
            raise AlgebraicSolveError("load-bus Newton produced non-finite "
                                      "iterates")
    raise AlgebraicSolveError(
        f"load-bus Newton did not reach {tol:g} within {max_iter} iterations")


def _algebraic_jacobian(theta_diff, volt_g, volt_l, network: Network,
                        params: PlantParams) -> np.ndarray:
    """Jacobian of the stacked load residuals w.r.t. (freq_l, volt_l)."""
    ng, nl = network.n_gen, network.n_load
    volts = np.concatenate([volt_g, volt_l])
    jac = np.zeros((2 * nl, 2 * nl))
    jac[:nl, :nl] = -np.diag(params.load.damping)
    # flow sensitivities w.r.t. load voltages
    dp = np.zeros((nl, nl))
    dq = np.zeros((nl, nl))
    for i in range(nl):
        k = ng + i
        dp[i, i] = 2.0 * network.g_shunt[k] * volts[k]
        dq[i, i] = -2.0 * network.b_shunt[k] * volts[k]
    s = np.sin(theta_diff)
    c = np.cos(theta_diff)
    for e in range(network.n_edges):
        i, j = int(network.edge_from[e]), int(network.edge_to[e])
        be, ge = network.b_line[e], network.g_line[e]
        p_i, p_j = be * s[e] + ge * c[e], -be * s[e] + ge * c[e]
        q_i, q_j = ge * s[e] - be * c[e], -ge * s[e] - be * c[e]
        if i >= ng:
            dp[i - ng, i - ng] += volts[j] * p_i
            dq[i - ng, i - ng] += volts[j] * q_i
        if j >= ng:
            dp[j - ng, j - ng] += volts[i] * p_j
            dq[j - ng, j - ng] += volts[i] * q_j
        if i >= ng and j >= ng:
            dp[i - ng, j - ng] += volts[i] * p_i
            dp[j - ng, i - ng] += volts[j] * p_j
            dq[i - ng, j - ng] += volts[i] * q_i
            dq[j - ng, i - ng] += volts[j] * q_j
    jac[:nl, nl:] = -dp
    jac[nl:, nl:] = -dq
    return jac


def step(t: float, state: ClosedLoopState, inputs: ClosedLoopInputs,
         config: IntegratorConfig, system: ClosedLoop,
         drift: np.ndarray | None = None) -> ClosedLoopState:
    """One RK4 step of length ``config.step`` from time ``t``.

    The state must be algebraically consistent on entry; each stage
    re-solves the load buses and the returned state is consistent again.
    """
    y, z = system.pack_state(state)
    if drift is None:
        drift = np.zeros(system.network.n_gen)
    m, ng, nl, mc = system._dims_args()
    y1, z1, ok = _kernels._rk4_step(
        y, z, config.step, *system._kernel_args(),
        inputs.p_load, inputs.q_load, inputs.u_field, drift,
        m, ng, nl, mc, config.newton_tol, config.max_newton)
    if not ok:
        raise AlgebraicSolveError(
            f"load-bus Newton failed during the step at t={t:g}")
    return system.unpack_state(y1, z1)


@dataclass
class Trajectory:
    """Sampled closed-loop run plus everything needed to analyse it."""

    t: np.ndarray
    theta_diff: np.ndarray
    momentum: np.ndarray
    volt_g: np.ndarray
    freq_l: np.ndarray
    volt_l: np.ndarray
    p_gen: np.ndarray
    price: np.ndarray
    flow: np.ndarray
    status: str                      # "completed" | "diverged"
    failure: str | None
    diverged_at: float | None
    events_applied: tuple
    system: ClosedLoop
    scenario: Scenario
    u_field: np.ndarray
    q_load: np.ndarray
    initial_equilibrium: object

    @property
    def n_samples(self) -> int:
        return len(self.t)

    def state_at(self, k: int) -> ClosedLoopState:
        plant = PlantState(self.theta_diff[k], self.momentum[k],
                           self.volt_g[k], self.freq_l[k], self.volt_l[k])
        ctrl = ControllerState(self.p_gen[k], self.price[k], self.flow[k])
        return ClosedLoopState(plant=plant, ctrl=ctrl)

    def omega(self) -> np.ndarray:
        """Nodal frequency deviations, p.u., shape (n_samples, n)."""
        gen = self.momentum / self.system.params.gen.inertia
        return np.hstack([gen, self.freq_l])

    def omega_hz(self) -> np.ndarray:
        return self.omega() * NOMINAL_HZ

    def voltages(self) -> np.ndarray:
        return np.hstack([self.volt_g, self.volt_l])

    def p_load_at(self, t: float) -> np.ndarray:
        """Active demand vector at time ``t`` (events already folded in)."""
        net = self.system.network
        vec = self.scenario.p_load_vector(net)
        for ev in self.scenario.events:
            if isinstance(ev, StepLoad) and ev.t <= t:
                vec[net.node_index(ev.node)] += ev.delta_p
        return vec

    def inputs_at(self, t: float) -> ClosedLoopInputs:
        return ClosedLoopInputs(p_load=self.p_load_at(t),
                                q_load=self.q_load.copy(),
                                u_field=self.u_field.copy())

    def hamiltonian(self) -> np.ndarray:
        """Closed-loop stored energy at every sample."""
        sys = self.system
        gains = sys.gains
        out = np.empty(self.n_samples)
        for k in range(self.n_samples):
            state = self.state_at(k)
            hp = plant_hamiltonian(state.plant, sys.network, sys.params)
            hc = 0.5 * (np.sum(gains.p_gen * state.ctrl.p_gen**2)
                        + np.sum(gains.price * state.ctrl.price**2)
                        + np.sum(gains.flow * state.ctrl.flow**2))
            out[k] = hp + hc
        return out

    def alg_residuals(self) -> np.ndarray:
        """Max-norm of the load-bus residuals at every sample."""
        sys = self.system
        out = np.empty(self.n_samples)
        for k in range(self.n_samples):
            state = self.state_at(k)
            inp = PlantInput(p_gen=state.ctrl.p_gen, u_field=self.u_field,
                             q_load=self.q_load,
                             p_load=self.p_load_at(self.t[k]))
            _, g_alg = plant_residuals(state.plant, inp, sys.network,
                                       sys.params)
            out[k] = np.max(np.abs(g_alg)) if len(g_alg) else 0.0
        return out


def _segment_mesh(t_a: float, t_b: float, h: float, out_every: float):
    """Step-end times for one span: multiples of ``h`` from ``t_a``, capped
    at the endpoint, with any output-grid time in between inserted as an
    extra (shortened) step end.  The flags mark ends on the output grid."""
    n_steps = int(np.ceil((t_b - t_a) / h - 1e-9))
    raw = t_a + h * np.arange(1, n_steps + 1)
    raw[-1] = t_b
    k_lo = int(np.floor(t_a / out_every + 1e-9)) + 1
    k_hi = int(np.floor(t_b / out_every + 1e-9))
    grid = out_every * np.arange(k_lo, k_hi + 1, dtype=float)
    extra = grid[np.abs(raw[None, :] - grid[:, None]).min(axis=1) > 1e-9] \
        if len(grid) else grid
    times = np.sort(np.concatenate([raw, extra])) if len(extra) else raw
    dts = np.diff(np.concatenate([[t_a], times]))
    on_grid = np.abs(times - np.round(times / out_every) * out_every) < 1e-9
    return dts, times, on_grid


def simulate(scenario: Scenario) -> Trajectory:
    """Run one scenario from its pre-fault steady state.

    Events are applied exactly at their timestamps by splitting the mesh;
    the algebraic subsystem is re-solved after each event before
    integration continues.  A mid-run solver failure or a frequency or
    voltage excursion beyond the validity bounds truncates the run with
    status ``diverged``.
    """
    from .equilibrium import EquilibriumProblem, solve_equilibrium

    network = scenario.build_network()
    params = scenario.build_params()
    comm = scenario.build_comm(network)
    cost = scenario.build_cost(network)
    gains = scenario.build_gains(network, comm)
    system = ClosedLoop(network, params, comm, cost, gains, scenario.mode)
    config = scenario.integrator

    p_load = scenario.p_load_vector(network)
    q_load = scenario.q_load_vector(network)
    problem = EquilibriumProblem(
        network=network, params=params, cost=cost, comm=comm,
        p_load=p_load, q_load=q_load,
        u_field=scenario.u_field_vector(network),
        voltage_target=scenario.voltage_target, mode="lossy")
    eq0 = solve_equilibrium(problem)
    u_field = eq0.u_field

    y, z = system.pack_state(eq0.state)
    m, ng, nl, mc = system.dims
    n = ng + nl

    # event boundaries inside the horizon
    breaks = sorted({ev.from_t if isinstance(ev, ClockDrift) else ev.t
                     for ev in scenario.events} - {0.0})
    boundaries = [0.0] + [b for b in breaks if b < scenario.horizon] \
        + [scenario.horizon]

    drift = np.zeros(ng)
    for ev in scenario.events:
        if isinstance(ev, ClockDrift) and ev.from_t == 0.0:
            drift[network.gen_ids.index(ev.node)] += ev.offset_hz / NOMINAL_HZ

    n_max = int(np.floor(scenario.horizon / config.output_every + 1e-9)) + 1
    out_t = np.empty(n_max)
    out_y = np.empty((n_max, system.n_diff))
    out_z = np.empty((n_max, max(system.n_alg, 1)))
    out_t[0] = 0.0
    out_y[0] = y
    out_z[0, :system.n_alg] = z
    rec = 1

    status = "completed"
    failure = None
    diverged_at = None
    applied = [(0.0, ev.describe()) for ev in scenario.events
               if isinstance(ev, ClockDrift) and ev.from_t == 0.0]
    dims_args = system._dims_args()

    for t_a, t_b in zip(boundaries[:-1], boundaries[1:]):
        dts, times, on_grid = _segment_mesh(t_a, t_b, config.step,
                                            config.output_every)
        steps, rec, code, t_reach = _kernels._integrate_span(
            y, z, t_a, dts, times, on_grid, *system._kernel_args(),
            p_load, q_load, u_field, drift, *dims_args,
            config.newton_tol, config.max_newton,
            config.omega_max, config.volt_min,
            out_t, out_y, out_z, rec)
        if code != _kernels.OK:
            status = "diverged"
            failure = {_kernels.FAIL_ALGEBRAIC: "algebraic",
                       _kernels.FAIL_FREQUENCY: "frequency",
                       _kernels.FAIL_VOLTAGE: "voltage"}[code]
            diverged_at = float(t_reach)
            break

        # apply the events scheduled exactly at the span end
        if t_b < scenario.horizon:
            for ev in scenario.events:
                ev_t = ev.from_t if isinstance(ev, ClockDrift) else ev.t
                if abs(ev_t - t_b) > 1e-12:
                    continue
                applied.append((t_b, ev.describe()))
                if isinstance(ev, StepLoad):
                    p_load[network.node_index(ev.node)] += ev.delta_p
                elif isinstance(ev, ClockDrift):
                    drift[network.gen_ids.index(ev.node)] += \
                        ev.offset_hz / NOMINAL_HZ
                else:
                    lo, hi = sorted(ev.edge)
                    pos = comm.edges.index((lo, hi))
                    system.edge_active[pos] = 0.0
                    y[m + 3 * ng + n + pos] = 0.0
            # re-establish algebraic consistency under the new inputs
            z_new, ok, _ = _kernels._solve_algebraic(
                y, z, network.edge_from, network.edge_to, network.b_line,
                network.g_line, network.b_shunt, network.g_shunt,
                params.load.damping, p_load, q_load, *dims_args[:3],
                config.newton_tol, config.max_newton)
            if not ok:
                status = "diverged"
                failure = "algebraic"
                diverged_at = float(t_b)
                break
            z = z_new
            # the post-event algebraic jump replaces the recorded sample
            if rec > 0 and abs(out_t[rec - 1] - t_b) < 1e-9:
                out_z[rec - 1, :system.n_alg] = z

    t_arr = out_t[:rec].copy()
    n_al = system.n_alg
    price_off = m + 3 * ng
    traj = Trajectory(
        t=t_arr,
        theta_diff=out_y[:rec, :m].copy(),
        momentum=out_y[:rec, m:m + ng].copy(),
        volt_g=out_y[:rec, m + ng:m + 2 * ng].copy(),
        freq_l=out_z[:rec, :nl].copy(),
        volt_l=out_z[:rec, nl:n_al].copy(),
        p_gen=out_y[:rec, m + 2 * ng:m + 3 * ng].copy(),
        price=out_y[:rec, price_off:price_off + n].copy(),
        flow=out_y[:rec, price_off + n:].copy(),
        status=status,
        failure=failure,
        diverged_at=diverged_at,
        events_applied=tuple(applied),
        system=system,
        scenario=scenario,
        u_field=u_field,
        q_load=q_load,
        initial_equilibrium=eq0,
    )
    return traj
