#!/usr/bin/env python3
"""
Streamlit Dashboard for resilient CBF runs
Interactive viewer for recorded traces: safety levels, inputs, paths and
solver statuses, plus a one-click runner for the shipped scenarios.
"""

import json
import logging
import sys
from pathlib import Path
from typing import Dict, Optional

import pandas as pd
import streamlit as st

from invariance_monitor import verify_invariance
from scenarios import load_scenario, scenario_from_dict
from simulation import REPORT_FILE, SCENARIO_FILE, Trace, run
from trace_report import event_statistics, inputs_figure, levels_figure, paths_figure, status_figure

st.set_page_config(
    page_title="Resilient CBF Dashboard",
    page_icon="🛡️",
    layout="wide",
    initial_sidebar_state="expanded"
)

st.markdown("""
<style>
    .main-header {
        text-align: center;
        padding: 1rem;
        background: linear-gradient(90deg, #667eea 0%, #764ba2 100%);
        color: white;
        border-radius: 10px;
        margin-bottom: 2rem;
    }
</style>
""", unsafe_allow_html=True)

SCENARIO_DIR = Path(__file__).with_name("scenarios")


class TraceDashboard:
    """Loads traces from run directories or fresh simulations"""

    def __init__(self, default_dir: Optional[str] = None):
        self.default_dir = default_dir
        self.logger = logging.getLogger(__name__)

    def load_run(self, trace_dir: str):
        path = Path(trace_dir)
        scenario = scenario_from_dict(json.loads((path / SCENARIO_FILE).read_text()))
        trace = Trace.load(path)
        report = json.loads((path / REPORT_FILE).read_text()) if (path / REPORT_FILE).exists() else {}
        return scenario, trace, report

    def simulate(self, scenario_file: str, seed: int, horizon: Optional[float]):
        overrides = {"horizon": str(horizon)} if horizon else None
        scenario = load_scenario(SCENARIO_DIR / scenario_file, overrides)
        trace = run(scenario, seed)
        report = verify_invariance(trace, scenario.barrier, scenario.cascade).to_dict()
        return scenario, trace, report


def show_summary(scenario, trace, report: Dict):
    col1, col2, col3, col4 = st.columns(4)
    max_h = report.get("max_h_tot", float(trace.steps()["h_tot"].max()))
    col1.metric("🛡️ max h_tot", f"{max_h:.4g}")
    col2.metric("🤖 Agents", f"{len(scenario.models)} ({len(scenario.adversarial_ids)} adversarial)")
    col3.metric("⚠️ Best-effort events", report.get("fallback_count", trace.fallback_total))
    col4.metric("⏱️ Horizon", f"{scenario.horizon:g} s")
    if max_h > 0:
        st.error(f"❌ Safety violated, first at t={report.get('first_violation')}")
    else:
        st.success("✅ Trajectory stayed in the safe set")


def main():
    """Main Streamlit application"""
    default_dir = sys.argv[1] if len(sys.argv) > 1 else None
    dashboard = TraceDashboard(default_dir)

    st.markdown("""
    <div class="main-header">
        <h1>🛡️ Resilient CBF Dashboard</h1>
        <p>Sampled-data safety filters under adversarial agents</p>
    </div>
    """, unsafe_allow_html=True)

    st.sidebar.title("🔧 Source")
    source = st.sidebar.radio("Trace source", ["📁 Run directory", "🚀 Simulate"])
    loaded = None
    try:
        if source == "📁 Run directory":
            trace_dir = st.sidebar.text_input("Run directory", value=default_dir or "")
            if trace_dir:
                loaded = dashboard.load_run(trace_dir)
        else:
            files = sorted(p.name for p in SCENARIO_DIR.glob("*.json"))
            scenario_file = st.sidebar.selectbox("Scenario", files)
            seed = st.sidebar.number_input("Seed", min_value=0, value=0, step=1)
            horizon = st.sidebar.number_input("Horizon override [s] (0 keeps the file value)",
                                              min_value=0.0, value=5.0)
            if st.sidebar.button("Run"):
                with st.spinner("Simulating..."):
                    st.session_state["loaded"] = dashboard.simulate(scenario_file, int(seed), horizon or None)
            loaded = st.session_state.get("loaded")
    except Exception as e:
        st.error(f"❌ Could not load run: {e}")
        return

    if loaded is None:
        st.info("Choose a run directory or simulate a scenario from the sidebar.")
        return
    scenario, trace, report = loaded

    show_summary(scenario, trace, report)
    page = st.sidebar.selectbox("Section", ["📈 Safety levels", "🎮 Inputs", "🗺️ Paths", "📊 Statuses"])
    if page == "📈 Safety levels":
        st.plotly_chart(levels_figure(trace), use_container_width=True)
    elif page == "🎮 Inputs":
        st.plotly_chart(inputs_figure(trace, scenario.models), use_container_width=True)
    elif page == "🗺️ Paths":
        st.plotly_chart(paths_figure(trace, scenario.models, scenario.obstacles), use_container_width=True)
    else:
        st.plotly_chart(status_figure(trace), use_container_width=True)
        stats = event_statistics(trace)
        if stats["slack"]:
            st.dataframe(pd.DataFrame([stats["slack"]]), use_container_width=True)

    with st.expander("Report"):
        st.json(report)


if __name__ == "__main__":
    main()
