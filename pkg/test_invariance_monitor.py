"""Trace re-verification and run reports"""

import json

import numpy as np
import pytest

from barrier import BarrierAtom, ComposedBarrier
from invariance_monitor import build_run_report, oracle_h, save_report, verify_invariance
from scenarios import scenario_from_dict
from simulation import SAMPLE, STEP, Trace, run


def _hand_trace(barrier, states, times):
    trace = Trace("hand", 0, 1, 4, 4)
    for t, x in zip(times, states):
        h = barrier.value(x)
        trace.rows.append([t, -1, STEP, "", h, h, 0.0, 0.0, 0.0, 0.0] + list(x))
    trace.rows.append([times[1], 0, SAMPLE, "Fallback", 0.0, 0.0, 0.0, 0.0, 0.0, 0.0] + list(states[1]))
    trace.events.append({"t": times[1], "agent": 0, "status": "Fallback", "slack": -0.2, "level_value": 0.0})
    return trace


@pytest.fixture
def toy_cascade_data():
    """1-D double integrator braking before the wall x = 1"""
    return {
        "name": "wall",
        "agents": [{"type": "double_integrator", "dim": 1, "beta": 0.0, "role": "normal", "input_bound": 2.0,
                    "initial_state": [0.0, 0.9], "controller": "normal_high_order"}],
        "barrier": {"rho": 1.0, "halfspaces": [{"agent": 0, "normal": [1.0], "offset": 1.0}]},
        "alphas": [{"kind": "linear", "gain": 1.0}, {"kind": "linear", "gain": 1.0}],
        "margin": {"override_eta_prime": 0.5},
        "sampling": {"period": 0.05, "jitter": 0.01},
        "position_bounds": [-5.0, 5.0],
        "horizon": 4.0,
        "dt_max": 0.005,
    }


class TestVerifyInvariance:
    def test_injected_violation_is_flagged(self, two_single_integrators):
        barrier = ComposedBarrier([BarrierAtom.pair(0, 1, 1.0)], 1.0, two_single_integrators)
        states = [np.array([0.0, 0.0, 3.0, 0.0]), np.array([0.0, 0.0, 2.0, 0.0]),
                  np.array([0.0, 0.0, 0.5, 0.0]), np.array([0.0, 0.0, 2.0, 0.0])]
        report = verify_invariance(_hand_trace(barrier, states, [0.0, 0.1, 0.2, 0.3]), barrier)
        assert not report.safe
        assert report.first_violation == pytest.approx(0.2)
        assert report.max_h_tot == pytest.approx(0.75)
        assert report.fallback_count == 1
        assert report.fallback_per_agent == {"0": 1}
        assert report.min_slack == pytest.approx(-0.2)
        assert any("h_tot > 0" in alert for alert in report.alerts)

    def test_safe_trace(self, two_single_integrators):
        barrier = ComposedBarrier([BarrierAtom.pair(0, 1, 1.0)], 1.0, two_single_integrators)
        states = [np.array([0.0, 0.0, d, 0.0]) for d in (3.0, 2.5, 2.0)]
        report = verify_invariance(_hand_trace(barrier, states, [0.0, 0.1, 0.2]), barrier)
        assert report.safe
        assert report.first_violation is None
        assert report.logged_h_residual <= 1e-12

    def test_oracle_matches_barrier(self, two_single_integrators, rng):
        atoms = [BarrierAtom.pair(0, 1, 1.0), BarrierAtom.obstacle(0, (2.0, 2.0), 0.5)]
        barrier = ComposedBarrier(atoms, 3.0, two_single_integrators)
        for _ in range(50):
            x = rng.uniform(-3, 3, 4)
            assert oracle_h(barrier, x) == pytest.approx(barrier.value(x), abs=1e-12)

    def test_cascade_levels_hold_when_top_row_holds(self, toy_cascade_data):
        scenario = scenario_from_dict(toy_cascade_data)
        trace = run(scenario, seed=0)
        report = verify_invariance(trace, scenario.barrier, scenario.cascade)
        assert trace.psi_columns == ["psi_0", "psi_1"]
        assert report.fallback_count == 0
        assert all(value <= 0 for value in report.psi_max)
        assert report.safe


def test_run_report_is_json_ready(trivial_data, tmp_path):
    scenario = scenario_from_dict(trivial_data)
    trace = run(scenario, seed=0)
    report = build_run_report(trace, scenario, verify_invariance(trace, scenario.barrier))
    path = save_report(report, tmp_path / "report.json")
    data = json.loads(path.read_text())
    assert data["scenario"] == "trivial"
    assert data["safe"] is True
    assert data["run_status"] == "complete"
    assert "eta" in data["margins"]
