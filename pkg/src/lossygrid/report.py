"""Figure rendering for run reports.

Figures are written as PNG files next to the delimited output; everything
uses the non-interactive backend so batch runs work headless.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .core import NOMINAL_HZ
from .dae import Trajectory
from .passivity import DissipationTrace
from .scenario import StepLoad, CommEdgeFail


def _mark_events(ax, traj: Trajectory):
    for ev in traj.scenario.events:
        if isinstance(ev, (StepLoad, CommEdgeFail)):
            ax.axvline(ev.t, color="0.75", lw=0.8, zorder=0)


def plot_frequencies(traj: Trajectory, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(8.1, 3.24))
    omega_hz = traj.omega_hz()
    for k, nid in enumerate(traj.system.network.node_ids):
        ax.plot(traj.t, omega_hz[:, k], lw=1.0, label=f"node {nid}")
    _mark_events(ax, traj)
    ax.set_xlabel("t (s)")
    ax.set_ylabel(r"$\Delta f$ (Hz)")
    ax.grid(alpha=0.3)
    ax.legend(ncol=4, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_injections(traj: Trajectory, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(8.1, 3.24))
    for k, nid in enumerate(traj.system.network.gen_ids):
        ax.plot(traj.t, traj.p_gen[:, k], lw=1.0, label=f"gen {nid}")
    _mark_events(ax, traj)
    ax.set_xlabel("t (s)")
    ax.set_ylabel(r"$p_g$ (p.u.)")
    ax.grid(alpha=0.3)
    ax.legend(ncol=3, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_prices(traj: Trajectory, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(8.1, 3.24))
    for k, nid in enumerate(traj.system.network.node_ids):
        ax.plot(traj.t, traj.price[:, k], lw=1.0, label=f"node {nid}")
    _mark_events(ax, traj)
    ax.set_xlabel("t (s)")
    ax.set_ylabel("price")
    ax.grid(alpha=0.3)
    ax.legend(ncol=4, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_voltages(traj: Trajectory, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(8.1, 3.24))
    volts = traj.voltages()
    for k, nid in enumerate(traj.system.network.node_ids):
        ax.plot(traj.t, volts[:, k], lw=1.0, label=f"node {nid}")
    _mark_events(ax, traj)
    ax.set_xlabel("t (s)")
    ax.set_ylabel("U (p.u.)")
    ax.grid(alpha=0.3)
    ax.legend(ncol=4, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_dissipation(traj: Trajectory, trace: DissipationTrace,
                     path: Path) -> Path:
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(8.1, 5.0), sharex=True)
    ax1.plot(trace.t, trace.shifted, lw=1.0, color="C0")
    ax1.set_ylabel(r"$\bar H$")
    ax1.grid(alpha=0.3)
    ax2.plot(trace.t, trace.gap, lw=1.0, color="C3")
    ax2.axhline(0.0, color="0.6", lw=0.8)
    ax2.set_ylabel("dissipation gap")
    ax2.set_xlabel("t (s)")
    ax2.grid(alpha=0.3)
    _mark_events(ax1, traj)
    _mark_events(ax2, traj)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_run_figures(traj: Trajectory, trace: DissipationTrace,
                       out_dir: str | Path) -> list[Path]:
    """Render the standard per-run figure set; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return [
        plot_frequencies(traj, out_dir / "frequencies.png"),
        plot_injections(traj, out_dir / "injections.png"),
        plot_prices(traj, out_dir / "prices.png"),
        plot_voltages(traj, out_dir / "voltages.png"),
        plot_dissipation(traj, trace, out_dir / "dissipation.png"),
    ]
