"""Scenario loading, overrides and validation"""

import copy
import json
from pathlib import Path

import numpy as np
import pytest

from cbf_errors import ScenarioError
from controllers import ControllerKind, NominalKind, nominal_input
from dynamics import Role
from scenarios import apply_overrides, generate_obstacles, load_scenario, scenario_from_dict

SCENARIO_DIR = Path(__file__).with_name("scenarios")


class TestShippedScenarios:
    def test_sim1_layout(self):
        scenario = load_scenario(SCENARIO_DIR / "sim1_unicycles.json")
        assert len(scenario.models) == 5
        assert scenario.adversarial_ids == [3, 4]
        assert all(m.kind == "unicycle" for m in scenario.models)
        assert scenario.barrier.value(scenario.initial_state) <= 0
        assert scenario.cascade is None

    def test_sim1_adversaries_chase_closest_normal(self):
        scenario = load_scenario(SCENARIO_DIR / "sim1_unicycles.json")
        for agent in scenario.adversarial_ids:
            controller = scenario.controllers[agent]
            assert controller.kind == ControllerKind.NOMINAL_ONLY
            assert controller.nominal.kind == NominalKind.PURSUIT_PD
            assert controller.nominal.target is None
        x_bar = scenario.initial_state
        model = scenario.models[3]
        u = nominal_input(scenario.controllers[3].nominal, x_bar[12:15], 0.0, model, x_bar, scenario.models)
        # output (20, 25) is closest to agent 1's output (0.92705, 2.85317)
        np.testing.assert_allclose(u, [0.92705 - 20.0, 2.85317 - 25.0], atol=1e-9)

    def test_sim1_worst_case_companion(self):
        scenario = load_scenario(SCENARIO_DIR / "sim1_unicycles_worst_case.json")
        assert scenario.adversarial_ids == [3, 4]
        assert all(scenario.controllers[i].kind == ControllerKind.ADVERSARIAL_MAX for i in (3, 4))
        assert scenario.margin.override_eta == pytest.approx(8.0566)

    def test_sim2_layout(self):
        scenario = load_scenario(SCENARIO_DIR / "sim2_doubleint.json")
        assert scenario.normal_ids == [0, 1, 2, 3]
        assert scenario.cascade.order == 2
        assert len(scenario.obstacles) == 10
        assert "illustrative" in scenario.description
        assert all(v <= 0 for v in scenario.cascade.values(scenario.initial_state))
        assert scenario.adversary_cascade() is not None

    def test_desk_estimates_margins(self, desk_data):
        desk_data["margin"]["sample_count"] = 200
        scenario = scenario_from_dict(desk_data)
        assert scenario.margin.provenance["mu"] == "sampled-estimate"
        assert scenario.margin.mu > 0
        assert scenario.margin.phi_sum == pytest.approx(0.3)


class TestOverrides:
    def test_known_keys(self, desk_data):
        data = apply_overrides(desk_data, {"eta": "0.5", "horizon": "3", "eta_zero_ablation": "true"})
        assert data["margin"]["override_eta"] == 0.5
        assert data["horizon"] == 3.0
        assert data["flags"]["eta_zero_ablation"] is True
        assert "override_eta" not in desk_data["margin"]

    def test_unknown_key(self, desk_data):
        with pytest.raises(ScenarioError):
            apply_overrides(desk_data, {"rho": "2"})

    def test_ablation_zeroes_effective_margin(self, trivial_data):
        trivial_data["flags"] = {"eta_zero_ablation": True}
        trivial_data["margin"] = {"override_eta": 3.0}
        scenario = scenario_from_dict(trivial_data)
        assert scenario.effective_margin().override_eta == 0.0
        assert scenario.margin.override_eta == 3.0


class TestValidation:
    def test_initial_state_must_be_safe(self, trivial_data):
        trivial_data["agents"][0]["initial_state"] = [4.0, 0.0]
        with pytest.raises(ScenarioError):
            scenario_from_dict(trivial_data)

    def test_adversary_cannot_run_normal_filter(self, desk_data):
        desk_data["margin"] = {"override_eta": 0.1}
        desk_data["agents"][2]["controller"] = "normal_distributed"
        with pytest.raises(ScenarioError):
            scenario_from_dict(desk_data)

    def test_unknown_agent_type(self, trivial_data):
        trivial_data["agents"][0]["type"] = "quadrotor"
        with pytest.raises(ScenarioError):
            scenario_from_dict(trivial_data)

    def test_missing_agents(self):
        with pytest.raises(ScenarioError):
            scenario_from_dict({"name": "empty"})

    def test_unreadable_file(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(ScenarioError):
            load_scenario(path)

    def test_synchronous_defaults_to_joint_filter(self, trivial_data):
        trivial_data["agents"][0].pop("controller")
        trivial_data["sampling"]["synchronous"] = True
        scenario = scenario_from_dict(trivial_data)
        assert scenario.controllers[0].kind == ControllerKind.NORMAL_CENTRALIZED
        assert scenario.schedule.max_jitter == 0.0


class TestObstacles:
    def test_generated_obstacles_do_not_overlap(self):
        obstacles = generate_obstacles(10, 2.0, [0, 0, -20], [100, 100, 20], seed=4)
        centres = np.array([o.center for o in obstacles])
        assert len(obstacles) == 10
        for i in range(10):
            for j in range(i + 1, 10):
                assert np.linalg.norm(centres[i] - centres[j]) >= 4.0

    def test_generation_is_seeded(self):
        a = generate_obstacles(5, 1.0, [0, 0], [20, 20], seed=9)
        b = generate_obstacles(5, 1.0, [0, 0], [20, 20], seed=9)
        assert a == b

    def test_impossible_packing(self):
        with pytest.raises(ScenarioError):
            generate_obstacles(50, 5.0, [0, 0], [10, 10], seed=0, max_tries=500)


def test_resolved_source_reloads_without_estimation(desk_data):
    desk_data["margin"]["sample_count"] = 200
    scenario = scenario_from_dict(desk_data)
    resolved = json.loads(json.dumps(scenario.resolved_source()))
    assert "estimate" not in resolved["margin"]
    reloaded = scenario_from_dict(copy.deepcopy(resolved))
    assert reloaded.margin.mu == pytest.approx(scenario.margin.mu)
    assert [m.role for m in reloaded.models].count(Role.ADVERSARIAL) == 1
