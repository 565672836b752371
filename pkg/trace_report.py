#!/usr/bin/env python3
"""
Trace plots and summary statistics.

PNG figures are rendered with matplotlib (Agg backend) for batch runs; the
plotly builders at the bottom feed the streamlit dashboard.
"""

import logging
import os
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import plotly.graph_objects as go
from plotly.subplots import make_subplots

from dynamics import AgentModel, StateLayout
from polytope import vertices

logger = logging.getLogger(__name__)

BEST_EFFORT = ("Fallback", "NumericalFailure")


def input_slices(models: Sequence[AgentModel]) -> List[slice]:
    slices, offset = [], 0
    for model in models:
        slices.append(slice(offset, offset + model.input_dim))
        offset += model.input_dim
    return slices


def input_bound(model: AgentModel) -> Optional[float]:
    if not model.input_set.is_constant:
        return None
    return float(np.max(np.abs(vertices(model.input_set))))


def event_statistics(trace) -> Dict:
    """Event counts per status and spread of the safety-row slack"""
    events = trace.event_frame()
    counts = {str(k): int(v) for k, v in events["status"].value_counts().sort_index().items()} if len(events) else {}
    slack = events["slack"].replace([np.inf, -np.inf], np.nan).dropna() if len(events) else pd.Series(dtype=float)
    stats = {"events": int(len(events)), "status_counts": counts}
    if len(slack):
        stats["slack"] = {"min": float(slack.min()), "median": float(slack.median()), "max": float(slack.max())}
    else:
        stats["slack"] = None
    return stats


class TraceReporter:
    """Renders PNG figures for one recorded trace"""

    def __init__(self, trace, models: Sequence[AgentModel], output_dir: str = "report_output"):
        self.trace = trace
        self.models = list(models)
        self.output_dir = output_dir
        self.logger = logging.getLogger(__name__)
        os.makedirs(self.output_dir, exist_ok=True)

    def generate_graphs(self) -> List[str]:
        steps = self.trace.steps()
        samples = self.trace.samples()
        written = []
        if steps.empty:
            self.logger.warning("No steps recorded, nothing to plot")
            return written
        written.append(self._plot_levels(steps))
        written.append(self._plot_inputs(samples))
        written.append(self._plot_input_norms(samples))
        self.logger.info(f"📊 {len(written)} figures written to {self.output_dir}/")
        return written

    def _plot_levels(self, steps: pd.DataFrame) -> str:
        fig, ax = plt.subplots(figsize=(12, 5))
        ax.plot(steps["t"], steps["h_tot"], "b-", linewidth=2, label="h_tot")
        for col in self.trace.psi_columns[1:]:
            ax.plot(steps["t"], steps[col], linewidth=1.5, label=col)
        ax.axhline(y=0, color="red", linestyle="--", alpha=0.7, label="Boundary")
        ax.set_title("Safety level over time (non-positive is safe)", fontweight="bold")
        ax.set_xlabel("t [s]")
        ax.grid(True, alpha=0.3)
        ax.legend()
        path = os.path.join(self.output_dir, "levels.png")
        plt.tight_layout()
        plt.savefig(path, dpi=150, bbox_inches="tight")
        plt.close(fig)
        return path

    def _agent_samples(self, samples: pd.DataFrame, agent: int) -> Tuple[pd.DataFrame, np.ndarray]:
        rows = samples[samples["agent"] == agent]
        u = rows[self.trace.u_columns].to_numpy(dtype=float)[:, input_slices(self.models)[agent]]
        return rows, u

    def _plot_inputs(self, samples: pd.DataFrame) -> str:
        n = len(self.models)
        fig, axes = plt.subplots(n, 1, figsize=(12, 2.4 * n), sharex=True, squeeze=False)
        fig.suptitle("Applied inputs per agent", fontsize=14, fontweight="bold")
        for agent, model in enumerate(self.models):
            ax = axes[agent, 0]
            rows, u = self._agent_samples(samples, agent)
            for k in range(model.input_dim):
                ax.step(rows["t"], u[:, k], where="post", linewidth=1.2, label=f"u[{k}]")
            bad = rows["status"].isin(BEST_EFFORT).to_numpy()
            if bad.any():
                for k in range(model.input_dim):
                    ax.plot(rows["t"].to_numpy()[bad], u[bad, k], "rx", markersize=5)
            ax.set_ylabel(f"agent {agent}\n({model.role.value})")
            ax.grid(True, alpha=0.3)
        axes[0, 0].legend(loc="upper right")
        axes[-1, 0].set_xlabel("t [s]")
        path = os.path.join(self.output_dir, "inputs.png")
        plt.tight_layout()
        plt.savefig(path, dpi=150, bbox_inches="tight")
        plt.close(fig)
        return path

    def _plot_input_norms(self, samples: pd.DataFrame) -> str:
        fig, ax = plt.subplots(figsize=(12, 5))
        for agent, model in enumerate(self.models):
            rows, u = self._agent_samples(samples, agent)
            if rows.empty:
                continue
            line, = ax.step(rows["t"], np.max(np.abs(u), axis=1), where="post", label=f"agent {agent}")
            bound = input_bound(model)
            if bound is not None:
                ax.axhline(y=bound, color=line.get_color(), linestyle="--", alpha=0.5)
        ax.set_title("Input infinity norm against bound", fontweight="bold")
        ax.set_xlabel("t [s]")
        ax.grid(True, alpha=0.3)
        ax.legend(ncol=2)
        path = os.path.join(self.output_dir, "input_norms.png")
        plt.tight_layout()
        plt.savefig(path, dpi=150, bbox_inches="tight")
        plt.close(fig)
        return path


def levels_figure(trace) -> go.Figure:
    steps = trace.steps()
    fig = go.Figure()
    fig.add_trace(go.Scatter(x=steps["t"], y=steps["h_tot"], name="h_tot", line=dict(width=2)))
    for col in trace.psi_columns[1:]:
        fig.add_trace(go.Scatter(x=steps["t"], y=steps[col], name=col))
    fig.add_hline(y=0, line_dash="dash", line_color="red")
    fig.update_layout(title="Safety level over time", xaxis_title="t [s]", height=400)
    return fig


def inputs_figure(trace, models: Sequence[AgentModel]) -> go.Figure:
    samples = trace.samples()
    slices = input_slices(models)
    fig = make_subplots(rows=len(models), cols=1, shared_xaxes=True,
                        subplot_titles=[f"agent {m.id} ({m.role.value})" for m in models])
    for agent, model in enumerate(models):
        rows = samples[samples["agent"] == agent]
        u = rows[trace.u_columns].to_numpy(dtype=float)[:, slices[agent]]
        for k in range(model.input_dim):
            fig.add_trace(go.Scatter(x=rows["t"], y=u[:, k], mode="lines", line_shape="hv",
                                     name=f"a{agent} u[{k}]"), row=agent + 1, col=1)
        bad = rows["status"].isin(BEST_EFFORT).to_numpy()
        if bad.any():
            fig.add_trace(go.Scatter(x=rows["t"].to_numpy()[bad], y=u[bad, 0], mode="markers",
                                     marker=dict(symbol="x", color="red"), name=f"a{agent} best-effort"),
                          row=agent + 1, col=1)
    fig.update_layout(height=220 * len(models), showlegend=False)
    return fig


def paths_figure(trace, models: Sequence[AgentModel], obstacles=()) -> go.Figure:
    """Top-down view of the first two output coordinates"""
    steps = trace.steps()
    x = steps[trace.x_columns].to_numpy(dtype=float)
    layout = StateLayout.from_models(models)
    fig = go.Figure()
    for agent, model in enumerate(models):
        p = np.array([model.position(row[layout.slice(agent)]) for row in x])
        colour = "crimson" if models[agent].is_adversarial else "royalblue"
        fig.add_trace(go.Scatter(x=p[:, 0], y=p[:, 1], mode="lines", line=dict(color=colour),
                                 name=f"agent {agent}"))
    for obs in obstacles:
        cx, cy = obs.center[0], obs.center[1]
        fig.add_shape(type="circle", x0=cx - obs.radius, y0=cy - obs.radius, x1=cx + obs.radius,
                      y1=cy + obs.radius, line_color="gray", fillcolor="lightgray", opacity=0.5)
    fig.update_layout(title="Agent paths", xaxis_title="x", yaxis_title="y", height=500)
    fig.update_yaxes(scaleanchor="x", scaleratio=1)
    return fig


def status_figure(trace) -> go.Figure:
    stats = event_statistics(trace)
    counts = stats["status_counts"]
    fig = go.Figure(go.Bar(x=list(counts.keys()), y=list(counts.values())))
    fig.update_layout(title="Sampling events by solver status", height=300)
    return fig
