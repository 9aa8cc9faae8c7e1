"""Command-line interface.

Exit codes of ``simulate``: 0 converged, 3 steady frequency offset,
4 diverged, 1 error.  ``sweep`` and ``paper-suite`` exit 0 when every run
completed (diverged runs are legitimate outcomes there) and 1 on errors.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .harness import builtin_paper_case, paper_suite, run, sweep
from .scenario import load_scenario

_STATUS_EXIT = {"converged": 0, "steady-offset": 3, "diverged": 4}


def _load(scenario_path: str | None):
    if scenario_path is None:
        return builtin_paper_case()
    return load_scenario(scenario_path)


@click.group()
def main():
    """Distributed price-based frequency control on lossy grids."""


@main.command("simulate")
@click.option("--scenario", "scenario_path", type=click.Path(exists=True),
              default=None, help="Scenario file (defaults to the bundled case).")
@click.option("--out", "out_dir", type=click.Path(), required=True,
              help="Output directory for CSV, reports and figures.")
@click.option("--figures/--no-figures", default=True, show_default=True)
def simulate_cmd(scenario_path, out_dir, figures):
    """Run one scenario and write its outputs."""
    scenario = _load(scenario_path)
    result = run(scenario, out_dir, figures=figures)
    s = result.summary
    click.echo(f"status: {s.status}")
    click.echo(f"steady offset: {s.steady_offset_hz:.3e} Hz")
    click.echo(f"sharing defect: {s.sharing_defect:.3e} | "
               f"price spread: {s.lambda_spread:.3e}")
    click.echo(f"outputs in {result.out_dir}")
    sys.exit(_STATUS_EXIT.get(s.status, 1))


@main.command("sweep")
@click.option("--scenario", "scenario_path", type=click.Path(exists=True),
              default=None)
@click.option("--param", "parameter", type=click.Choice(["eta", "topology"]),
              required=True)
@click.option("--values", required=True,
              help="Comma-separated values, e.g. 0.5,1,2,3.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--figures/--no-figures", default=False, show_default=True)
@click.option("--workers", type=int, default=1, show_default=True)
def sweep_cmd(scenario_path, parameter, values, out_dir, figures, workers):
    """Run the scenario once per parameter value."""
    scenario = _load(scenario_path)
    value_list = [v.strip() for v in values.split(",") if v.strip()]
    if parameter == "eta":
        value_list = [float(v) for v in value_list]
    entries = sweep(scenario, parameter, value_list, out_dir,
                    figures=figures, workers=workers)
    for e in entries:
        click.echo(f"{parameter}={e['value']}: {e['status']}"
                   + (f" ({e['error']})" if e.get("error") else ""))
    sys.exit(1 if any(e["status"] == "error" for e in entries) else 0)


@main.command("equilibrium")
@click.option("--scenario", "scenario_path", type=click.Path(exists=True),
              default=None)
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Optional JSON report path.")
def equilibrium_cmd(scenario_path, out_path):
    """Solve and print the pre-fault steady state of a scenario."""
    from .equilibrium import EquilibriumProblem, solve_equilibrium

    scenario = _load(scenario_path)
    network = scenario.build_network()
    problem = EquilibriumProblem(
        network=network, params=scenario.build_params(),
        cost=scenario.build_cost(network),
        comm=scenario.build_comm(network),
        p_load=scenario.p_load_vector(network),
        q_load=scenario.q_load_vector(network),
        u_field=scenario.u_field_vector(network),
        voltage_target=scenario.voltage_target,
        mode=scenario.mode)
    eq = solve_equilibrium(problem)
    report = eq.report()
    click.echo(f"price: {report['price']:.8f}")
    click.echo(f"surplus: {report['surplus']:.8f}  loss: {report['loss']:.8f}"
               f"  residual: {report['balance_residual']:.2e}")
    click.echo("node  p_gen        U           angle")
    for nid in network.node_ids:
        pg = report["p_gen"].get(nid)
        click.echo(f"{nid:>4}  {('-' if pg is None else f'{pg:+.6f}'):>11}  "
                   f"{report['voltages'][nid]:.6f}    "
                   f"{report['angles'][nid]:+.6f}")
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
        click.echo(f"report written to {out_path}")


@main.command("paper-suite")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--figures/--no-figures", default=True, show_default=True)
@click.option("--workers", type=int, default=1, show_default=True)
def paper_suite_cmd(out_dir, figures, workers):
    """Run the bundled experiment suite (topologies, loss-blind comparison,
    R/X sweep, clock drift, communication failure)."""
    results = paper_suite(out_dir, figures=figures, workers=workers)
    for group, entries in results.items():
        if isinstance(entries, list):
            for e in entries:
                click.echo(f"{group} {e.get('value')}: {e['status']}")
        else:
            click.echo(f"{group}: {entries['status']}")
    click.echo(f"outputs in {Path(out_dir).resolve()}")


@main.command("dump-scenario")
@click.argument("path", type=click.Path())
def dump_scenario_cmd(path):
    """Write the bundled study case as a scenario file."""
    from .scenario import save_scenario

    save_scenario(builtin_paper_case(), path)
    click.echo(f"scenario written to {path}")


if __name__ == "__main__":
    main()
