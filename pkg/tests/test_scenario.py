"""Scenario and network file handling: schema validation, strict parsing,
and round-tripping."""

import numpy as np
import pytest
import yaml

from lossygrid.harness import builtin_paper_case
from lossygrid.scenario import (ClockDrift, CommEdgeFail, IntegratorConfig,
                                Scenario, ScenarioError, StepLoad,
                                load_scenario, parse_scenario, save_scenario,
                                scenario_to_dict)


def test_builtin_case_values():
    scn = builtin_paper_case()
    net = scn.build_network()
    assert net.n_edges == 8
    assert net.gen_ids == (1, 2, 3, 4, 5)
    assert net.load_ids == (6, 7)
    params = scn.build_params()
    assert params.gen.inertia == pytest.approx([5.2, 4.0, 4.5, 4.2, 4.4])
    assert params.load.damping == pytest.approx([1.3, 1.3])
    assert scn.cost_weights == (1.0, 1.1, 1.2, 1.3, 1.4)
    assert scn.eta == 1.0
    assert [type(e) for e in scn.events] == [StepLoad, StepLoad]
    assert scn.events[0].t == 30.0 and scn.events[0].node == 6
    assert scn.events[1].t == 60.0 and scn.events[1].node == 7
    assert scn.horizon == 90.0


def test_roundtrip_through_yaml(tmp_path):
    scn = builtin_paper_case().with_updates(
        events=builtin_paper_case().events + (
            ClockDrift(node=1, offset_hz=-1.0),
            CommEdgeFail(t=45.0, edge=(1, 2)),
        ))
    path = tmp_path / "case.yaml"
    save_scenario(scn, path)
    loaded = load_scenario(path)
    assert loaded.eta == scn.eta
    assert loaded.cost_weights == scn.cost_weights
    assert loaded.events == scn.events
    assert loaded.p_load == scn.p_load
    assert loaded.integrator == scn.integrator
    assert loaded.build_network().edges == scn.build_network().edges


def test_network_file_reference(tmp_path):
    scn = builtin_paper_case()
    data = scenario_to_dict(scn)
    net_data = data.pop("network")
    with open(tmp_path / "grid.yaml", "w") as fh:
        yaml.safe_dump(net_data, fh)
    data["network"] = "grid.yaml"
    data["eta"] = 0.5  # scenario-level override
    with open(tmp_path / "case.yaml", "w") as fh:
        yaml.safe_dump(data, fh)
    loaded = load_scenario(tmp_path / "case.yaml")
    assert loaded.eta == 0.5
    assert loaded.build_network().n_edges == 8


@pytest.mark.parametrize("mutate, message", [
    (lambda d: d.update(unknown_key=1), "unknown key"),
    (lambda d: d["network"].update(extra=2), "unknown key"),
    (lambda d: d["network"]["nodes"][0].update(color="red"), "unknown key"),
    (lambda d: d["network"]["lines"][0].update(length=3), "unknown key"),
    (lambda d: d["gains"].update(speed=1), "unknown key"),
    (lambda d: d["integrator"].update(solver="bdf"), "unknown key"),
    (lambda d: d["events"].append({"type": "meteor", "t": 10.0}),
     "unknown event type"),
    (lambda d: d["events"].append({"type": "step_load", "t": 10.0}),
     "step_load"),
])
def test_strict_parsing_rejects_unknown_keys(mutate, message):
    data = scenario_to_dict(builtin_paper_case())
    mutate(data)
    with pytest.raises((ScenarioError, KeyError), match=message):
        parse_scenario(data)


def test_node_blocks_require_all_fields():
    data = scenario_to_dict(builtin_paper_case())
    del data["network"]["nodes"][0]["inertia"]
    with pytest.raises(ScenarioError, match="missing"):
        parse_scenario(data)


def test_event_times_must_be_inside_horizon():
    base = builtin_paper_case()
    with pytest.raises(ScenarioError, match="outside the horizon"):
        base.with_updates(events=(StepLoad(t=95.0, node=6, delta_p=0.1),))
    with pytest.raises(ScenarioError, match="not allowed"):
        base.with_updates(events=(StepLoad(t=0.0, node=6, delta_p=0.1),))


def test_events_must_reference_existing_entities():
    base = builtin_paper_case()
    with pytest.raises(ScenarioError, match="unknown node"):
        base.with_updates(
            events=(StepLoad(t=10.0, node=99, delta_p=0.1),)
        ).validate_against_network()
    with pytest.raises(ScenarioError, match="non-generator"):
        base.with_updates(
            events=(ClockDrift(node=6, offset_hz=-1.0),)
        ).validate_against_network()
    with pytest.raises(ScenarioError, match="does not exist"):
        base.with_updates(
            events=(CommEdgeFail(t=10.0, edge=(1, 7)),)
        ).validate_against_network()


def test_integrator_config_validation():
    with pytest.raises(ScenarioError):
        IntegratorConfig(step=-1e-3)
    with pytest.raises(ScenarioError, match="multiple"):
        IntegratorConfig(step=3e-3, output_every=5e-2)
    with pytest.raises(ScenarioError, match="scheme"):
        IntegratorConfig(scheme="euler")


def test_excitation_exclusivity():
    base = builtin_paper_case()
    with pytest.raises(ScenarioError, match="exactly one"):
        Scenario(network=base.network, eta=1.0, voltage_target=1.0,
                 u_field={1: 1.0})
    with pytest.raises(ScenarioError, match="exactly one"):
        Scenario(network=base.network, eta=1.0, voltage_target=None,
                 u_field=None)


def test_mode_validation():
    base = builtin_paper_case()
    with pytest.raises(ScenarioError, match="mode"):
        base.with_updates(mode="hybrid")


def test_load_vectors(paper_scenario):
    net = paper_scenario.build_network()
    p = paper_scenario.p_load_vector(net)
    assert p == pytest.approx([0, 0, 0, 0, 0, 0.3, 0.3])
    with pytest.raises(ScenarioError, match="non-load"):
        paper_scenario.with_updates(q_load={1: 0.1}).q_load_vector(net)
