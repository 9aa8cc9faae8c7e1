"""Steady states of the closed loop.

The solver computes the synchronized operating point (zero frequency
deviation with the loss-aware controller, a nonzero synchronous offset for
the loss-blind variant), the uniform price, and the minimum-norm virtual
power flows.  It is used both to initialize simulations and to provide the
reference point of the shifted-energy diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .controller import CommGraph, ControllerState
from .core import (Network, PlantParams, PlantState, conductance_terms,
                   power_flows)
from .dae import ClosedLoopState


class EquilibriumError(RuntimeError):
    """No steady state found for the given loads and line parameters."""


@dataclass(frozen=True)
class EquilibriumProblem:
    network: Network
    params: PlantParams
    cost: object
    comm: CommGraph
    p_load: np.ndarray                 # per node
    q_load: np.ndarray                 # per load node
    u_field: np.ndarray | None = None  # per generator, or None to calibrate
    voltage_target: float | None = None
    mode: str = "lossy"

    def __post_init__(self):
        if (self.u_field is None) == (self.voltage_target is None):
            raise ValueError("provide exactly one of u_field / voltage_target")
        if self.mode not in ("lossy", "lossless"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class Equilibrium:
    """Solved steady state plus the quantities reported alongside it."""

    state: ClosedLoopState
    theta_nodes: np.ndarray      # nodal angles, reference node at zero
    u_field: np.ndarray
    price: float                 # the uniform steady-state price
    omega_sync: float            # p.u.; zero for the loss-aware controller
    surplus: float
    loss: float
    residual_norm: float
    problem: EquilibriumProblem

    def report(self) -> dict:
        net = self.problem.network
        return {
            "p_gen": {i: float(v) for i, v in
                      zip(net.gen_ids, self.state.ctrl.p_gen)},
            "price": self.price,
            "omega_sync_pu": self.omega_sync,
            "surplus": self.surplus,
            "loss": self.loss,
            "balance_residual": self.surplus - self.loss,
            "voltages": {i: float(v) for i, v in
                         zip(net.node_ids, self.state.plant.voltages())},
            "angles": {i: float(v) for i, v in
                       zip(net.node_ids, self.theta_nodes)},
            "u_field": {i: float(v) for i, v in zip(net.gen_ids, self.u_field)},
            "residual_norm": self.residual_norm,
        }


def power_balance(p_gen, p_load, theta_diff, volts, network: Network):
    """Generation surplus, the line-loss expression it must match, and
    their difference."""
    volts = np.asarray(volts, dtype=float)
    theta_diff = np.asarray(theta_diff, dtype=float)
    surplus = float(np.sum(p_gen) - np.sum(p_load))
    ui = volts[network.edge_from]
    uj = volts[network.edge_to]
    loss = float(np.sum(network.g_shunt * volts**2)
                 + 2.0 * np.sum(network.g_line * ui * uj * np.cos(theta_diff)))
    return surplus, loss, surplus - loss


def _fd_jacobian(fun, x, r0):
    n = len(x)
    jac = np.empty((len(r0), n))
    for k in range(n):
        h = 1e-7 * max(1.0, abs(x[k]))
        xp = x.copy()
        xp[k] += h
        jac[:, k] = (fun(xp) - r0) / h
    return jac


def _damped_newton(fun, x0, tol=1e-12, max_iter=60):
    """Newton iteration with step halving; returns (x, max-norm residual)."""
    x = np.asarray(x0, dtype=float).copy()
    r = fun(x)
    norm = float(np.max(np.abs(r)))
    for _ in range(max_iter):
        if norm < tol:
            return x, norm
        jac = _fd_jacobian(fun, x, r)
        try:
            dx = np.linalg.solve(jac, r)
        except np.linalg.LinAlgError as exc:
            raise EquilibriumError(f"singular Jacobian in steady-state solve "
                                   f"(residual {norm:.3e})") from exc
        step = 1.0
        improved = False
        for _ in range(40):
            x_try = x - step * dx
            r_try = fun(x_try)
            norm_try = float(np.max(np.abs(r_try)))
            if np.isfinite(norm_try) and norm_try < norm:
                x, r, norm = x_try, r_try, norm_try
                improved = True
                break
            step *= 0.5
        if not improved:
            break
    if norm < 1e-10:
        return x, norm
    raise EquilibriumError(
        f"steady-state Newton stalled at residual {norm:.3e}; "
        "no equilibrium at the given loads and line parameters")


def solve_equilibrium(problem: EquilibriumProblem,
                      guess: "Equilibrium | None" = None,
                      reference_node: int = 0) -> Equilibrium:
    """Solve the full steady-state system of the closed loop.

    Unknowns are the nodal angles (one gauge-fixed at the reference node),
    the voltages (load voltages only when generator voltages are pinned to
    a calibration target), the injections, the uniform price, and, for the
    loss-blind controller, the synchronous frequency offset.  The virtual
    power flows are recovered afterwards as the minimum-norm solution of
    the communication balance.
    """
    net = problem.network
    params = problem.params
    n, ng, nl = net.n_nodes, net.n_gen, net.n_load
    calibrate = problem.u_field is None
    lossless = problem.mode == "lossless"
    free_angles = [k for k in range(n) if k != reference_node]

    def unpack(x):
        theta = np.zeros(n)
        theta[free_angles] = x[: n - 1]
        pos = n - 1
        if calibrate:
            volts = np.empty(n)
            volts[:ng] = problem.voltage_target
            volts[ng:] = x[pos: pos + nl]
            pos += nl
        else:
            volts = x[pos: pos + n]
            pos += n
        p_gen = x[pos: pos + ng]
        pos += ng
        lam = x[pos]
        pos += 1
        omega_s = x[pos] if lossless else 0.0
        return theta, volts, p_gen, lam, omega_s

    damping = np.concatenate([params.gen.damping, params.load.damping])

    def residual(x):
        theta, volts, p_gen, lam, omega_s = unpack(x)
        theta_diff = theta[net.edge_from] - theta[net.edge_to]
        p, q = power_flows(theta_diff, volts, net)
        injections = np.concatenate([p_gen, np.zeros(nl)])
        parts = [injections - problem.p_load - p - damping * omega_s,
                 -problem.q_load - q[ng:]]
        if not calibrate:
            parts.append(problem.u_field - volts[:ng]
                         - params.gen.xd_gap * q[:ng] / volts[:ng])
        parts.append(problem.cost.gradient(p_gen) - lam + omega_s)
        if lossless:
            parts.append(np.array([np.sum(p_gen) - np.sum(problem.p_load)]))
        return np.concatenate(parts)

    if guess is not None:
        theta0 = guess.theta_nodes - guess.theta_nodes[reference_node]
        volts0 = guess.state.plant.voltages()
        p0 = guess.state.ctrl.p_gen.copy()
        lam0, om0 = guess.price, guess.omega_sync
    else:
        theta0 = np.zeros(n)
        volts0 = np.full(n, problem.voltage_target if calibrate else 1.0)
        total = float(np.sum(problem.p_load))
        w = problem.cost.gradient(np.ones(ng))
        # flat start: proportional sharing of the total load
        lam0 = total / float(np.sum(1.0 / w)) if ng else 0.0
        p0 = lam0 / w
        om0 = 0.0

    x0 = [theta0[free_angles]]
    x0.append(volts0[ng:] if calibrate else volts0)
    x0.append(p0)
    x0.append([lam0])
    if lossless:
        x0.append([om0])
    x, norm = _damped_newton(residual, np.concatenate(x0))

    theta, volts, p_gen, lam, omega_s = unpack(x)
    theta_diff = theta[net.edge_from] - theta[net.edge_to]
    _, q = power_flows(theta_diff, volts, net)
    if calibrate:
        u_field = volts[:ng] + params.gen.xd_gap * q[:ng] / volts[:ng]
    else:
        u_field = problem.u_field.copy()

    phi_g, phi_l, _, _ = conductance_terms(theta_diff, volts, net, params.gen)
    phi = np.concatenate([phi_g, phi_l])
    rhs = np.concatenate([p_gen, np.zeros(nl)]) - problem.p_load
    if not lossless:
        rhs = rhs - phi
    dc = problem.comm.incidence()
    flow, *_ = np.linalg.lstsq(dc, rhs, rcond=None)

    plant = PlantState(
        theta_diff=theta_diff,
        momentum=params.gen.inertia * omega_s,
        volt_g=volts[:ng].copy(),
        freq_l=np.full(nl, omega_s),
        volt_l=volts[ng:].copy(),
    )
    ctrl = ControllerState(p_gen=p_gen.copy(),
                           price=np.full(n, lam),
                           flow=flow)
    surplus, loss, _ = power_balance(p_gen, problem.p_load, theta_diff,
                                     volts, net)
    return Equilibrium(
        state=ClosedLoopState(plant=plant, ctrl=ctrl),
        theta_nodes=theta,
        u_field=u_field,
        price=float(lam),
        omega_sync=float(omega_s),
        surplus=surplus,
        loss=loss,
        residual_norm=norm,
        problem=problem,
    )


def calibrate_excitation(voltage_target: float,
                         problem: EquilibriumProblem) -> np.ndarray:
    """Excitation voltages that place the no-event steady state's generator
    voltages exactly at the target."""
    calibrated = EquilibriumProblem(
        network=problem.network, params=problem.params, cost=problem.cost,
        comm=problem.comm, p_load=problem.p_load, q_load=problem.q_load,
        u_field=None, voltage_target=voltage_target, mode=problem.mode)
    return solve_equilibrium(calibrated).u_field
