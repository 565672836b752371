"""Figures and event statistics for recorded traces"""

from pathlib import Path

import plotly.graph_objects as go
import pytest

from scenarios import scenario_from_dict
from simulation import run
from trace_report import (TraceReporter, event_statistics, input_bound, input_slices, inputs_figure,
                          levels_figure, paths_figure, status_figure)


@pytest.fixture(scope="module")
def trivial_run():
    data = {
        "name": "trivial",
        "agents": [{"type": "single_integrator", "dim": 2, "input_bound": 1.0, "initial_state": [1.0, 0.5]}],
        "barrier": {"obstacles": [{"center": [4.0, 0.0], "radius": 1.0}]},
        "margin": {"override_eta": 0.0},
        "sampling": {"period": 0.05, "jitter": 0.01},
        "horizon": 1.0,
        "dt_max": 0.01,
    }
    scenario = scenario_from_dict(data)
    return scenario, run(scenario, seed=0)


def test_event_statistics(trivial_run):
    _, trace = trivial_run
    stats = event_statistics(trace)
    assert stats["events"] == len(trace.samples())
    assert sum(stats["status_counts"].values()) == stats["events"]
    assert stats["slack"]["min"] <= stats["slack"]["median"] <= stats["slack"]["max"]


def test_input_helpers(two_single_integrators):
    assert input_slices(two_single_integrators) == [slice(0, 2), slice(2, 4)]
    assert input_bound(two_single_integrators[0]) == pytest.approx(1.0)


def test_png_figures_written(trivial_run, tmp_path):
    scenario, trace = trivial_run
    written = TraceReporter(trace, scenario.models, str(tmp_path / "figures")).generate_graphs()
    assert sorted(Path(p).name for p in written) == ["input_norms.png", "inputs.png", "levels.png"]
    assert all(Path(p).stat().st_size > 0 for p in written)


def test_plotly_builders(trivial_run):
    scenario, trace = trivial_run
    figures = [levels_figure(trace), inputs_figure(trace, scenario.models),
               paths_figure(trace, scenario.models, scenario.obstacles), status_figure(trace)]
    assert all(isinstance(fig, go.Figure) for fig in figures)
    assert len(figures[1].data) >= 2
    assert len(figures[2].layout.shapes) == 1
