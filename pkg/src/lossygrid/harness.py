"""Scenario runner: executes experiments, writes the delimited outputs and
summary reports, and drives the bundled experiment suite.

Per run the harness writes ``trajectory.csv`` (fixed schema, see README),
``dissipation.csv`` (shifted-energy diagnostics), ``summary.json``,
equilibrium reports for the pre- and post-fault operating points, and the
rendered figures.  Identical scenarios produce byte-identical CSV files.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .controller import economic_dispatch_check
from .core import NOMINAL_HZ
from .dae import Trajectory, simulate
from .equilibrium import (Equilibrium, EquilibriumError, EquilibriumProblem,
                          power_balance, solve_equilibrium)
from .passivity import DissipationTrace, blocks_for, dissipation_trace
from .scenario import (ClockDrift, CommEdgeFail, Scenario, StepLoad,
                       save_scenario)

SETTLE_THRESHOLD_PU = 1e-3    # summary settling threshold
CONVERGED_OFFSET_HZ = 1e-3    # below this steady offset a run counts as converged
TAIL_SECONDS = 5.0

# paper-style 7-node test case --------------------------------------------

_CASE_GEN = {
    # id: (damping, b_shunt, inertia, xd, xd_transient, tau_voltage)
    1: (1.6, -5.5, 5.2, 0.02, 0.004, 6.45),
    2: (1.2, -5.5, 4.0, 0.03, 0.006, 7.7),
    3: (1.4, -3.3, 4.5, 0.03, 0.005, 8.3),
    4: (1.4, -3.1, 4.2, 0.025, 0.005, 7.0),
    5: (1.5, -7.0, 4.4, 0.02, 0.003, 7.36),
}
_CASE_LOAD = {6: (1.3, -2.0), 7: (1.3, -2.0)}
_CASE_LINES = [(1, 2, 1.27), (1, 5, 1.4), (1, 6, 2.0), (2, 3, 1.4),
               (2, 5, 2.05), (3, 4, 1.1), (4, 5, 1.0), (5, 7, 2.0)]
_CASE_WEIGHTS = (1.0, 1.1, 1.2, 1.3, 1.4)


def builtin_paper_case() -> Scenario:
    """The bundled 7-node study case: five generators, two loads, eight
    lines with unit R/X ratio, weighted quadratic cost, and +0.1 p.u. load
    steps at t=30 s (node 6) and t=60 s (node 7) over a 90 s horizon."""
    nodes = [
        {"id": i, "kind": "generator", "damping": v[0], "b_shunt": v[1],
         "inertia": v[2], "xd": v[3], "xd_transient": v[4],
         "tau_voltage": v[5]}
        for i, v in _CASE_GEN.items()
    ] + [
        {"id": i, "kind": "load", "damping": v[0], "b_shunt": v[1]}
        for i, v in _CASE_LOAD.items()
    ]
    lines = [{"from": a, "to": b, "b": b_val} for a, b, b_val in _CASE_LINES]
    return Scenario(
        network={"nodes": nodes, "lines": lines},
        eta=1.0,
        communication="physical",
        mode="lossy",
        cost_weights=_CASE_WEIGHTS,
        # small time constants give the ~10 s restoration seen in the study;
        # unit gains leave a price-consensus mode that rings for minutes
        gain_p=0.05,
        gain_price=0.05,
        gain_flow=0.05,
        p_load={6: 0.3, 7: 0.3},
        q_load={},
        voltage_target=1.0,
        horizon=90.0,
        events=(
            StepLoad(t=30.0, node=6, delta_p=0.1),
            StepLoad(t=60.0, node=7, delta_p=0.1),
        ),
        name="paper-case",
    )


# -- summary ----------------------------------------------------------------


@dataclass
class SummaryReport:
    """Tail-window digest of one run; numbers follow the trajectory CSV."""

    status: str                       # converged | steady-offset | diverged
    final_omega_max_pu: float
    final_omega_max_hz: float
    steady_offset_pu: float
    steady_offset_hz: float
    settling: tuple                   # ((event_time, settle_seconds | None), ...)
    sharing_defect: float
    lambda_spread: float
    balance_residual: float
    min_gap: float | None
    runtime_s: float
    n_samples: int
    failure: str | None = None
    diverged_at: float | None = None
    reference: str = "post-fault"
    name: str = ""

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "status": self.status,
            "final_omega_max_pu": self.final_omega_max_pu,
            "final_omega_max_hz": self.final_omega_max_hz,
            "steady_offset_pu": self.steady_offset_pu,
            "steady_offset_hz": self.steady_offset_hz,
            "settling": [{"event_t": t, "settle_s": s} for t, s in self.settling],
            "sharing_defect": self.sharing_defect,
            "lambda_spread": self.lambda_spread,
            "balance_residual": self.balance_residual,
            "min_gap": self.min_gap,
            "runtime_s": self.runtime_s,
            "n_samples": self.n_samples,
            "failure": self.failure,
            "diverged_at": self.diverged_at,
            "reference": self.reference,
        }


def _settling_times(traj: Trajectory) -> tuple:
    """Per event: seconds until max |omega| stays below the threshold for
    the rest of the inter-event window; None when it never settles."""
    omega = np.max(np.abs(traj.omega()), axis=1)
    event_times = sorted({ev.t for ev in traj.scenario.events
                          if isinstance(ev, (StepLoad, CommEdgeFail))})
    bounds = event_times + [traj.scenario.horizon]
    out = []
    for t_e, t_next in zip(event_times, bounds[1:]):
        # the sample at the next event time already carries its jump
        mask = (traj.t >= t_e - 1e-9) & (traj.t < t_next - 1e-9)
        tw, ow = traj.t[mask], omega[mask]
        settle = None
        below = ow < SETTLE_THRESHOLD_PU
        for k in range(len(tw)):
            if below[k:].all():
                settle = float(tw[k] - t_e)
                break
        out.append((float(t_e), settle))
    return tuple(out)


def summarize(traj: Trajectory, trace: DissipationTrace | None = None,
              runtime_s: float = float("nan"),
              reference: str = "post-fault") -> SummaryReport:
    omega = traj.omega()
    tail = traj.t >= traj.t[-1] - TAIL_SECONDS
    tail_mean = omega[tail].mean(axis=0)
    steady_pu = float(np.max(np.abs(tail_mean)))
    final_pu = float(np.max(np.abs(omega[-1])))
    p_tail = traj.p_gen[tail].mean(axis=0)
    lam_tail = traj.price[tail].mean(axis=0)

    if traj.status == "diverged":
        status = "diverged"
    elif steady_pu * NOMINAL_HZ < CONVERGED_OFFSET_HZ:
        status = "converged"
    else:
        status = "steady-offset"

    # power balance at the final sample
    last = traj.state_at(traj.n_samples - 1)
    _, _, residual = power_balance(
        last.ctrl.p_gen, traj.p_load_at(traj.t[-1]), last.plant.theta_diff,
        last.plant.voltages(), traj.system.network)

    return SummaryReport(
        status=status,
        final_omega_max_pu=final_pu,
        final_omega_max_hz=final_pu * NOMINAL_HZ,
        steady_offset_pu=steady_pu,
        steady_offset_hz=steady_pu * NOMINAL_HZ,
        settling=_settling_times(traj),
        sharing_defect=economic_dispatch_check(p_tail, traj.system.cost),
        lambda_spread=float(np.max(lam_tail) - np.min(lam_tail)),
        balance_residual=float(residual),
        min_gap=None if trace is None else trace.min_gap(),
        runtime_s=runtime_s,
        n_samples=traj.n_samples,
        failure=traj.failure,
        diverged_at=traj.diverged_at,
        reference=reference,
        name=traj.scenario.name,
    )


# -- delimited output -------------------------------------------------------


def trajectory_header(traj: Trajectory) -> list[str]:
    net = traj.system.network
    cols = ["t"]
    cols += [f"omega_{i}" for i in net.node_ids]
    cols += [f"p_g_{i}" for i in net.gen_ids]
    cols += [f"lambda_{i}" for i in net.node_ids]
    cols += [f"nu_{a}_{b}" for a, b in traj.system.comm.edges]
    cols += [f"U_{i}" for i in net.node_ids]
    cols += ["H", "Hbar", "gap"]
    return cols


def write_trajectory_csv(traj: Trajectory, trace: DissipationTrace,
                         path: Path) -> None:
    omega = traj.omega()
    volts = traj.voltages()
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(", ".join(trajectory_header(traj)) + "\n")
        for k in range(traj.n_samples):
            row = [f"{traj.t[k]:.6f}"]
            row += [repr(float(v)) for v in omega[k]]
            row += [repr(float(v)) for v in traj.p_gen[k]]
            row += [repr(float(v)) for v in traj.price[k]]
            row += [repr(float(v)) for v in traj.flow[k]]
            row += [repr(float(v)) for v in volts[k]]
            row += [repr(float(trace.hamiltonian[k])),
                    repr(float(trace.shifted[k])),
                    repr(float(trace.gap[k]))]
            fh.write(", ".join(row) + "\n")


def write_dissipation_csv(trace: DissipationTrace, path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("t, H, Hbar, gap, status\n")
        for k in range(len(trace.t)):
            fh.write(f"{trace.t[k]:.6f}, {float(trace.hamiltonian[k])!r}, "
                     f"{float(trace.shifted[k])!r}, {float(trace.gap[k])!r}, "
                     f"{trace.status}\n")


def write_equilibrium_report(eq: Equilibrium, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(eq.report(), fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- run / sweep -------------------------------------------------------------


@dataclass
class RunResult:
    trajectory: Trajectory
    trace: DissipationTrace
    summary: SummaryReport
    reference: Equilibrium
    out_dir: Path | None
    files: tuple = ()


def _post_fault_reference(traj: Trajectory) -> tuple[Equilibrium, str]:
    """Steady state for the input configuration after the final event; the
    pre-fault equilibrium is the fallback when that solve fails."""
    scn = traj.scenario
    sys = traj.system
    problem = EquilibriumProblem(
        network=sys.network, params=sys.params, cost=sys.cost, comm=sys.comm,
        p_load=traj.p_load_at(scn.horizon), q_load=traj.q_load,
        u_field=traj.u_field, voltage_target=None, mode=scn.mode)
    try:
        eq = solve_equilibrium(problem, guess=traj.initial_equilibrium)
        return eq, "post-fault"
    except EquilibriumError:
        return traj.initial_equilibrium, "pre-fault (post-fault solve failed)"


def run(scenario: Scenario, out_dir: str | Path | None,
        figures: bool = True) -> RunResult:
    """Simulate one scenario and, if ``out_dir`` is given, write the CSV
    files, reports and figures there."""
    t0 = time.perf_counter()
    traj = simulate(scenario)
    runtime = time.perf_counter() - t0

    ref, ref_kind = _post_fault_reference(traj)
    blocks = blocks_for(traj.system)
    trace = dissipation_trace(traj, ref.state, blocks)
    summary = summarize(traj, trace, runtime_s=runtime, reference=ref_kind)

    files = []
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_trajectory_csv(traj, trace, out_dir / "trajectory.csv")
        write_dissipation_csv(trace, out_dir / "dissipation.csv")
        with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
            json.dump(summary.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        write_equilibrium_report(traj.initial_equilibrium,
                                 out_dir / "equilibrium_prefault.json")
        write_equilibrium_report(ref, out_dir / "equilibrium_postfault.json")
        save_scenario(scenario, out_dir / "scenario.yaml")
        files = [out_dir / "trajectory.csv", out_dir / "dissipation.csv",
                 out_dir / "summary.json",
                 out_dir / "equilibrium_prefault.json",
                 out_dir / "equilibrium_postfault.json",
                 out_dir / "scenario.yaml"]
        if figures:
            from .report import render_run_figures
            files += render_run_figures(traj, trace, out_dir / "figures")
    return RunResult(trajectory=traj, trace=trace, summary=summary,
                     reference=ref,
                     out_dir=None if out_dir is None else Path(out_dir),
                     files=tuple(files))


SWEEP_PARAMETERS = ("eta", "topology")


def _sweep_variant(scenario: Scenario, parameter: str, value) -> Scenario:
    if parameter == "eta":
        return scenario.with_updates(
            eta=float(value), name=f"{scenario.name or 'run'}-eta-{value}")
    if parameter == "topology":
        return scenario.with_updates(
            communication=str(value),
            name=f"{scenario.name or 'run'}-topology-{value}")
    raise ValueError(f"sweep parameter must be one of {SWEEP_PARAMETERS}")


def _sweep_one(args) -> dict:
    scenario, out_dir, figures = args
    try:
        result = run(scenario, out_dir, figures=figures)
        entry = result.summary.to_dict()
        entry["error"] = None
    except Exception as exc:  # per-run failures recorded, sweep continues
        entry = {"name": scenario.name, "status": "error", "error": str(exc)}
    return entry


def sweep(scenario: Scenario, parameter: str, values, out_dir=None,
          figures: bool = False, workers: int = 1) -> list[dict]:
    """One run per value; per-run outputs land in subdirectories and the
    aggregate table in ``sweep.csv``.  Results keep the declared order."""
    if parameter not in SWEEP_PARAMETERS:
        raise ValueError(f"sweep parameter must be one of {SWEEP_PARAMETERS}")
    values = list(values)
    jobs = []
    for v in values:
        variant = _sweep_variant(scenario, parameter, v)
        sub = None if out_dir is None else Path(out_dir) / f"{parameter}_{v}"
        jobs.append((variant, sub, figures))

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(_sweep_one, jobs))
    else:
        entries = [_sweep_one(job) for job in jobs]

    for value, entry in zip(values, entries):
        entry["parameter"] = parameter
        entry["value"] = value

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_sweep_csv(entries, out_dir / "sweep.csv")
    return entries


_SWEEP_COLUMNS = ["parameter", "value", "status", "final_omega_max_hz",
                  "steady_offset_hz", "sharing_defect", "lambda_spread",
                  "balance_residual", "min_gap", "runtime_s", "error"]


def _write_sweep_csv(entries: list[dict], path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(", ".join(_SWEEP_COLUMNS) + "\n")
        for e in entries:
            row = [str(e.get(c, "")) for c in _SWEEP_COLUMNS]
            fh.write(", ".join(row) + "\n")


# -- the bundled experiment suite -------------------------------------------


def paper_suite(out_dir: str | Path, figures: bool = True,
                workers: int = 1) -> dict:
    """Run the full study-case suite: the four communication topologies,
    the loss-blind controller comparison, the R/X sweep, the clock-drift
    case and the communication-failure case."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = builtin_paper_case()
    results: dict = {}

    results["topologies"] = sweep(
        base, "topology", ["complete", "physical", "ring", "open_ring"],
        out_dir / "topologies", figures=figures, workers=workers)

    lossless = base.with_updates(mode="lossless", name="lossless-comparison")
    results["lossless"] = sweep(
        lossless, "eta", [0.25, 0.5, 1.0], out_dir / "lossless",
        figures=figures, workers=workers)

    results["eta"] = sweep(base, "eta", [0.5, 1.0, 2.0, 3.0],
                           out_dir / "eta", figures=figures, workers=workers)

    drift = base.with_updates(
        events=base.events + (ClockDrift(node=1, offset_hz=-1.0),),
        name="clock-drift")
    results["clock_drift"] = run(drift, out_dir / "clock_drift",
                                 figures=figures).summary.to_dict()

    comm_fail = base.with_updates(
        events=base.events + (CommEdgeFail(t=30.0, edge=(1, 2)),),
        name="comm-failure")
    results["comm_failure"] = run(comm_fail, out_dir / "comm_failure",
                                  figures=figures).summary.to_dict()

    with open(out_dir / "suite_summary.json", "w", encoding="utf-8") as fh:
        json.dump(results, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return results
