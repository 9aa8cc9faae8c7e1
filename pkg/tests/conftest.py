"""Shared fixtures: the bundled study case and its pre-fault steady state."""

import numpy as np
import pytest

from lossygrid.dae import ClosedLoop, ClosedLoopInputs
from lossygrid.equilibrium import EquilibriumProblem, solve_equilibrium
from lossygrid.harness import builtin_paper_case


@pytest.fixture(scope="session")
def paper_scenario():
    return builtin_paper_case()


@pytest.fixture(scope="session")
def paper_model(paper_scenario):
    """(network, params, comm, cost, gains) of the bundled case."""
    net = paper_scenario.build_network()
    return (net, paper_scenario.build_params(),
            paper_scenario.build_comm(net),
            paper_scenario.build_cost(net),
            paper_scenario.build_gains(net, paper_scenario.build_comm(net)))


@pytest.fixture(scope="session")
def paper_system(paper_scenario, paper_model):
    net, params, comm, cost, gains = paper_model
    return ClosedLoop(net, params, comm, cost, gains, paper_scenario.mode)


@pytest.fixture(scope="session")
def paper_equilibrium(paper_scenario, paper_model):
    net, params, comm, cost, gains = paper_model
    problem = EquilibriumProblem(
        network=net, params=params, cost=cost, comm=comm,
        p_load=paper_scenario.p_load_vector(net),
        q_load=paper_scenario.q_load_vector(net),
        voltage_target=paper_scenario.voltage_target)
    return solve_equilibrium(problem)


@pytest.fixture(scope="session")
def paper_inputs(paper_scenario, paper_model, paper_equilibrium):
    net = paper_model[0]
    return ClosedLoopInputs(p_load=paper_scenario.p_load_vector(net),
                            q_load=paper_scenario.q_load_vector(net),
                            u_field=paper_equilibrium.u_field)


def perturbed_state(eq_state, rng, scale=0.1):
    """Random perturbation of a closed-loop state, all blocks."""
    st = eq_state.copy()
    st.plant.theta_diff = st.plant.theta_diff + rng.uniform(
        -scale, scale, len(st.plant.theta_diff))
    st.plant.momentum = st.plant.momentum + rng.uniform(
        -scale, scale, len(st.plant.momentum))
    st.plant.volt_g = st.plant.volt_g + rng.uniform(
        -scale, scale, len(st.plant.volt_g))
    st.plant.freq_l = st.plant.freq_l + rng.uniform(
        -scale, scale, len(st.plant.freq_l))
    st.plant.volt_l = st.plant.volt_l + rng.uniform(
        -scale, scale, len(st.plant.volt_l))
    st.ctrl.p_gen = st.ctrl.p_gen + rng.uniform(
        -scale, scale, len(st.ctrl.p_gen))
    st.ctrl.price = st.ctrl.price + rng.uniform(
        -scale, scale, len(st.ctrl.price))
    st.ctrl.flow = st.ctrl.flow + rng.uniform(
        -scale, scale, len(st.ctrl.flow))
    return st
