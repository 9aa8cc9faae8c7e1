"""Runner tests: summary digests recomputable from the delimited output,
byte-stable CSV files, sweep bookkeeping and figure rendering."""

import json

import numpy as np
import pytest

from lossygrid.core import NOMINAL_HZ
from lossygrid.harness import (builtin_paper_case, run, summarize, sweep,
                               trajectory_header)
from lossygrid.scenario import StepLoad


@pytest.fixture(scope="module")
def short_scenario():
    return builtin_paper_case().with_updates(
        horizon=20.0, events=(StepLoad(t=10.0, node=6, delta_p=0.1),),
        name="short-case")


@pytest.fixture(scope="module")
def short_run(short_scenario, tmp_path_factory):
    out = tmp_path_factory.mktemp("short_run")
    return run(short_scenario, out, figures=True), out


def _read_csv(path):
    with open(path) as fh:
        header = [c.strip() for c in fh.readline().split(",")]
        rows = np.array([[float(v) for v in line.split(",")]
                         for line in fh if line.strip()])
    return header, rows


def test_csv_schema(short_run):
    result, out = short_run
    header, rows = _read_csv(out / "trajectory.csv")
    expected = trajectory_header(result.trajectory)
    assert header == expected
    assert header[:8] == ["t", "omega_1", "omega_2", "omega_3", "omega_4",
                          "omega_5", "omega_6", "omega_7"]
    assert "p_g_1" in header and "lambda_7" in header and "nu_1_2" in header
    assert header[-3:] == ["H", "Hbar", "gap"]
    assert rows.shape == (result.trajectory.n_samples, len(expected))


def test_csv_bytes_are_reproducible(short_scenario, tmp_path):
    a = run(short_scenario, tmp_path / "a", figures=False)
    b = run(short_scenario, tmp_path / "b", figures=False)
    bytes_a = (tmp_path / "a" / "trajectory.csv").read_bytes()
    bytes_b = (tmp_path / "b" / "trajectory.csv").read_bytes()
    assert bytes_a == bytes_b
    assert (tmp_path / "a" / "dissipation.csv").read_bytes() == \
        (tmp_path / "b" / "dissipation.csv").read_bytes()


def test_summary_recomputable_from_outputs(short_run):
    """An independent reader of the delimited output must reproduce the
    summary numbers."""
    result, out = short_run
    s = result.summary
    header, rows = _read_csv(out / "trajectory.csv")
    t = rows[:, 0]
    omega = rows[:, 1:8]
    p_gen = rows[:, [header.index(f"p_g_{i}") for i in range(1, 6)]]
    lam = rows[:, [header.index(f"lambda_{i}") for i in range(1, 8)]]

    assert np.max(np.abs(omega[-1])) == pytest.approx(s.final_omega_max_pu,
                                                      rel=1e-12)
    tail = t >= t[-1] - 5.0
    tail_mean = omega[tail].mean(axis=0)
    assert np.max(np.abs(tail_mean)) == pytest.approx(s.steady_offset_pu,
                                                      rel=1e-12)
    assert s.steady_offset_hz == pytest.approx(
        s.steady_offset_pu * NOMINAL_HZ, rel=1e-12)
    weights = np.array([1.0, 1.1, 1.2, 1.3, 1.4])
    marginal = p_gen[tail].mean(axis=0) / weights
    assert np.max(marginal) - np.min(marginal) == pytest.approx(
        s.sharing_defect, rel=1e-9)
    lam_tail = lam[tail].mean(axis=0)
    assert np.max(lam_tail) - np.min(lam_tail) == pytest.approx(
        s.lambda_spread, rel=1e-9)
    # the dissipation file repeats the energy columns
    _, diss = _read_csv_with_status(out / "dissipation.csv")
    assert diss.shape[0] == rows.shape[0]
    assert np.array_equal(diss[:, 1], rows[:, header.index("H")])
    # the balance residual is recomputable from the equilibrium report
    with open(out / "equilibrium_postfault.json") as fh:
        eq_report = json.load(fh)
    assert abs(eq_report["balance_residual"]) < 1e-8


def _read_csv_with_status(path):
    with open(path) as fh:
        header = [c.strip() for c in fh.readline().split(",")]
        rows = np.array([[float(v) for v in line.split(",")[:-1]]
                         for line in fh if line.strip()])
    return header, rows


def test_summary_settling_consistent(short_run):
    result, _ = short_run
    (event_t, settle), = result.summary.settling
    assert event_t == 10.0
    omega = np.max(np.abs(result.trajectory.omega()), axis=1)
    t = result.trajectory.t
    k = np.searchsorted(t, event_t + settle, side="left")
    window = (t >= event_t + settle - 1e-9) & (t < 20.0 - 1e-9)
    assert np.all(omega[window] < 1e-3)


def test_run_writes_figures(short_run):
    _, out = short_run
    figures = sorted((out / "figures").glob("*.png"))
    names = {p.name for p in figures}
    assert {"frequencies.png", "injections.png", "prices.png",
            "voltages.png", "dissipation.png"} <= names
    assert all(p.stat().st_size > 5000 for p in figures)


def test_run_statuses(paper_scenario):
    assert run(paper_scenario, None).summary.status == "converged"
    lossless = run(paper_scenario.with_updates(mode="lossless"), None)
    assert lossless.summary.status == "steady-offset"
    assert lossless.summary.steady_offset_hz > 0.01
    diverged = run(paper_scenario.with_updates(eta=8.0), None)
    assert diverged.summary.status == "diverged"
    assert diverged.summary.failure is not None


def test_sweep_bookkeeping(short_scenario, tmp_path):
    entries = sweep(short_scenario, "eta", [0.0, 0.5], tmp_path,
                    figures=False)
    assert [e["value"] for e in entries] == [0.0, 0.5]
    # the short horizon ends mid-decay; both outcomes are legitimate here
    assert all(e["status"] in ("converged", "steady-offset")
               for e in entries)
    assert (tmp_path / "sweep.csv").exists()
    assert (tmp_path / "eta_0.0" / "trajectory.csv").exists()
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert len(lines) == 3 and lines[0].startswith("parameter")


def test_sweep_records_failures_and_continues(short_scenario, tmp_path):
    bad = short_scenario.with_updates(p_load={6: 40.0, 7: 40.0})
    entries = sweep(bad, "eta", [1.0, 0.5], tmp_path, figures=False)
    assert all(e["status"] == "error" for e in entries)
    assert all(e["error"] for e in entries)
    assert len(entries) == 2


def test_sweep_empty_values(short_scenario):
    assert sweep(short_scenario, "eta", []) == []


def test_sweep_parallel_workers_match_serial(short_scenario, tmp_path):
    serial = sweep(short_scenario, "eta", [0.0, 1.0], None)
    parallel = sweep(short_scenario, "eta", [0.0, 1.0], None, workers=2)
    for a, b in zip(serial, parallel):
        assert a["status"] == b["status"]
        assert a["steady_offset_hz"] == pytest.approx(b["steady_offset_hz"],
                                                      rel=1e-12)


def test_sweep_rejects_unknown_parameter(short_scenario):
    with pytest.raises(ValueError, match="sweep parameter"):
        sweep(short_scenario, "loads", [1.0])


def test_summary_serialization_roundtrip(short_run):
    result, out = short_run
    with open(out / "summary.json") as fh:
        data = json.load(fh)
    assert data["status"] == result.summary.status
    assert data["steady_offset_hz"] == result.summary.steady_offset_hz
    assert data["settling"][0]["event_t"] == 10.0
