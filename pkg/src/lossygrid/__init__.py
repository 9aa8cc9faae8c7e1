"""Simulator and analysis toolkit for distributed price-based frequency
control of lossy AC power grids."""

from .core import (GeneratorParams, LoadParams, Network, PlantInput,
                   PlantParams, PlantState, SingularStateError, TopologyError,
                   build_network, conductance_terms, cycle_residual,
                   plant_gradient, plant_hamiltonian, plant_residuals,
                   power_flows, NOMINAL_HZ)
from .controller import (CommGraph, CommTopologyError, ControllerGains,
                         ControllerState, QuadraticCost, build_comm_topology,
                         comm_graph_from_edges, controller_rhs, cost_gradient,
                         economic_dispatch_check, kkt_residual)
from .scenario import (ClockDrift, CommEdgeFail, IntegratorConfig, Scenario,
                       ScenarioError, StepLoad, load_scenario, save_scenario)
from .dae import (AlgebraicSolveError, ClosedLoop, ClosedLoopInputs,
                  ClosedLoopState, Trajectory, simulate, solve_algebraic,
                  step)
from .equilibrium import (Equilibrium, EquilibriumError, EquilibriumProblem,
                          calibrate_excitation, power_balance,
                          solve_equilibrium)
from .passivity import (ClosedLoopBlocks, DissipationTrace, assemble_blocks,
                        dissipation_gap, dissipation_trace,
                        shifted_hamiltonian)
from .harness import (SummaryReport, builtin_paper_case, paper_suite, run,
                      sweep)

__version__ = "0.1.0"
