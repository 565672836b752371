"""Shared fixtures for the simulator tests"""

import json
import logging
from pathlib import Path

import numpy as np
import pytest

from barrier import BarrierAtom, ComposedBarrier
from dynamics import Role, double_integrator, single_integrator
from polytope import PolytopeSpec

SCENARIO_DIR = Path(__file__).with_name("scenarios")


@pytest.fixture(autouse=True)
def quiet_logs(caplog):
    caplog.set_level(logging.WARNING)


@pytest.fixture
def unit_box():
    return PolytopeSpec.symmetric_box([1.0, 1.0])


@pytest.fixture
def two_single_integrators():
    box = PolytopeSpec.symmetric_box([1.0, 1.0])
    return [single_integrator(0, 2, box), single_integrator(1, 2, box)]


@pytest.fixture
def head_on_pair():
    """Normal agent at the origin, adversary on the x axis, both |u| <= 1"""
    box = PolytopeSpec.symmetric_box([1.0])
    return [single_integrator(0, 1, box), single_integrator(1, 1, box, role=Role.ADVERSARIAL)]


@pytest.fixture
def toy_double_integrator():
    """1-D double integrator with h = x - 1"""
    model = double_integrator(0, 1, PolytopeSpec.symmetric_box([10.0]))
    barrier = ComposedBarrier([BarrierAtom.halfspace(0, [1.0], 1.0)], rho=1.0, models=[model])
    return model, barrier


@pytest.fixture
def desk_data():
    return json.loads((SCENARIO_DIR / "desk_three_agents.json").read_text())


@pytest.fixture
def trivial_data():
    """One normal single integrator kept inside a disc, zero nominal"""
    return {
        "name": "trivial",
        "agents": [{"type": "single_integrator", "dim": 2, "role": "normal", "input_bound": 1.0,
                    "initial_state": [1.0, 0.5], "controller": "normal_distributed"}],
        "barrier": {"rho": 1.0, "containment": [], "obstacles": [{"center": [4.0, 0.0], "radius": 1.0}]},
        "alphas": [{"kind": "linear", "gain": 1.0}],
        "margin": {"override_eta": 0.0},
        "sampling": {"period": 0.05, "jitter": 0.01},
        "horizon": 2.0,
        "dt_max": 0.01,
    }


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
