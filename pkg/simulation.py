#!/usr/bin/env python3
"""
End-to-end simulation runs.

A run generates the sampling schedule, drives the event loop to the horizon
and records one trace row per integration step and per sampling event.
Traces are written as CSV (float format %.17g, so identical runs produce
identical files) next to the scenario that produced them.
"""

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from cbf_errors import CbfError
from controllers import BroadcastTable
from dynamics import Role, SystemState
from scheduler import EventQueue, EventRecord, World, generate_schedule, step_event

logger = logging.getLogger(__name__)

TRACE_FILE = "trace.csv"
EVENTS_FILE = "events.csv"
REPORT_FILE = "report.json"
SCENARIO_FILE = "scenario.json"
FLOAT_FORMAT = "%.17g"

STEP = "step"
SAMPLE = "sample"
ERROR_STATUS = "ERROR"


@dataclass
class Trace:
    """Recorded run: integration steps and sampling events in time order"""
    scenario_name: str
    seed: int
    cascade_order: int
    input_dim: int
    state_dim: int
    rows: List[list] = field(default_factory=list)
    events: List[Dict] = field(default_factory=list)
    fallback_counts: Dict[int, int] = field(default_factory=dict)
    status: str = "complete"
    error: Optional[str] = None
    wall_time: float = 0.0

    @property
    def columns(self) -> List[str]:
        return (["t", "agent", "event_kind", "status", "h_tot"]
                + [f"psi_{j}" for j in range(self.cascade_order)]
                + [f"u_{k}" for k in range(self.input_dim)]
                + [f"x_{k}" for k in range(self.state_dim)])

    @property
    def psi_columns(self) -> List[str]:
        return [f"psi_{j}" for j in range(self.cascade_order)]

    @property
    def x_columns(self) -> List[str]:
        return [f"x_{k}" for k in range(self.state_dim)]

    @property
    def u_columns(self) -> List[str]:
        return [f"u_{k}" for k in range(self.input_dim)]

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=self.columns)

    def steps(self) -> pd.DataFrame:
        df = self.frame()
        return df[df["event_kind"] == STEP].reset_index(drop=True)

    def samples(self) -> pd.DataFrame:
        df = self.frame()
        return df[df["event_kind"] == SAMPLE].reset_index(drop=True)

    def event_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.events, columns=["t", "agent", "status", "slack", "level_value"])

    def states(self) -> np.ndarray:
        return self.steps()[self.x_columns].to_numpy(dtype=float)

    @property
    def fallback_total(self) -> int:
        return int(sum(self.fallback_counts.values()))

    def save(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.frame().to_csv(out_dir / TRACE_FILE, index=False, float_format=FLOAT_FORMAT)
        self.event_frame().to_csv(out_dir / EVENTS_FILE, index=False, float_format=FLOAT_FORMAT)
        return out_dir

    @classmethod
    def load(cls, trace_dir) -> "Trace":
        trace_dir = Path(trace_dir)
        df = pd.read_csv(trace_dir / TRACE_FILE, keep_default_na=False, na_values=[""],
                         float_precision="round_trip")
        df["status"] = df["status"].fillna("")
        meta = {}
        if (trace_dir / REPORT_FILE).exists():
            meta = json.loads((trace_dir / REPORT_FILE).read_text())
        trace = cls(
            scenario_name=meta.get("scenario", trace_dir.name),
            seed=int(meta.get("seed", 0)),
            cascade_order=sum(c.startswith("psi_") for c in df.columns),
            input_dim=sum(c.startswith("u_") for c in df.columns),
            state_dim=sum(c.startswith("x_") for c in df.columns),
            rows=df.values.tolist(),
            fallback_counts={int(k): v for k, v in meta.get("fallback_per_agent", {}).items()},
            status=meta.get("run_status", "complete"),
        )
        events_path = trace_dir / EVENTS_FILE
        if events_path.exists():
            trace.events = pd.read_csv(events_path, float_precision="round_trip").to_dict("records")
        return trace


class SimulationRunner:
    """Runs one (scenario, seed) pair and records the trace"""

    def __init__(self, scenario, seed: int = 0):
        self.scenario = scenario
        self.seed = seed
        self.logger = logging.getLogger(__name__)
        self.barrier = scenario.barrier
        self.cascade = scenario.cascade
        self.trace = Trace(
            scenario_name=scenario.name,
            seed=seed,
            cascade_order=max(1, scenario.cascade_order),
            input_dim=sum(m.input_dim for m in scenario.models),
            state_dim=sum(m.state_dim for m in scenario.models),
        )
        self.world: Optional[World] = None

    def _levels(self, x: np.ndarray) -> List[float]:
        h = self.barrier.value(x)
        if self.cascade is None:
            return [h] * self.trace.cascade_order
        return self.cascade.values(x)

    def _row(self, t: float, agent: int, kind: str, status: str, x: np.ndarray, held) -> list:
        levels = self._levels(x)
        u = np.concatenate(held) if held else np.zeros(0)
        return [float(t), int(agent), kind, status, float(levels[0])] + [float(v) for v in levels] \
            + u.tolist() + np.asarray(x, dtype=float).tolist()

    def _on_step(self, t: float, x: np.ndarray):
        self.trace.rows.append(self._row(t, -1, STEP, "", x, self.world.state.held_inputs))

    def _on_event(self, record: EventRecord):
        self.trace.rows.append(self._row(record.time, record.agent, SAMPLE, record.status.value,
                                         record.x, self.world.state.held_inputs))
        self.trace.events.append({"t": record.time, "agent": record.agent, "status": record.status.value,
                                  "slack": float(record.slack), "level_value": float(record.level_value)})

    def _build_world(self) -> World:
        scenario = self.scenario
        models = scenario.models
        held = [np.zeros(m.input_dim) for m in models]
        normal = [m for m in models if m.role == Role.NORMAL]
        adversarial = [m for m in models if m.role == Role.ADVERSARIAL]
        adversary_broadcast = None
        if any(c.self_filter for c in scenario.controllers):
            adversary_broadcast = BroadcastTable(adversarial)
        return World(
            state=SystemState(0.0, scenario.initial_state.copy(), held),
            models=models,
            controllers={c.agent: c for c in scenario.controllers},
            context=scenario.filter_context(),
            disturbance=scenario.disturbance(self.seed),
            dt_max=scenario.dt_max,
            broadcast=BroadcastTable(normal),
            adversary_broadcast=adversary_broadcast,
            on_step=self._on_step,
            on_event=self._on_event,
        )

    def run(self) -> Trace:
        scenario = self.scenario
        started = time.perf_counter()
        self.logger.info(f"🚀 running {scenario.name} seed={self.seed} horizon={scenario.horizon}s")
        streams = generate_schedule(scenario.schedule_for_seed(self.seed), scenario.horizon)
        queue = EventQueue(streams)
        self.world = self._build_world()
        self.trace.rows.append(self._row(0.0, -1, STEP, "", self.world.state.x, self.world.state.held_inputs))

        pending = None
        try:
            while len(queue):
                pending = queue.peek()
                step_event(queue, self.world)
            pending = None
            self.world.advance_to(scenario.horizon)
        except CbfError as exc:
            t, agent = pending if pending is not None else (self.world.state.time, -1)
            self.trace.rows.append(self._row(t, agent, SAMPLE, ERROR_STATUS, self.world.state.x,
                                             self.world.state.held_inputs))
            self.trace.status = "error"
            self.trace.error = f"{type(exc).__name__}: {exc}"
            self.logger.error(f"❌ {scenario.name} seed={self.seed} aborted at t={t:.4f}: {exc}")
            raise
        finally:
            self.trace.fallback_counts = dict(self.world.fallback_counts)
            self.trace.wall_time = time.perf_counter() - started

        if self.trace.fallback_total:
            self.logger.info(f"📊 {self.trace.fallback_total} best-effort events "
                             f"across {len(self.trace.fallback_counts)} agents")
        self.logger.info(f"✅ {scenario.name} seed={self.seed} finished: {len(self.trace.events)} samples "
                         f"in {self.trace.wall_time:.1f}s")
        return self.trace


def run(scenario, seed: int = 0) -> Trace:
    """Simulate the scenario to its horizon; deterministic per (scenario, seed)"""
    return SimulationRunner(scenario, seed).run()


def write_run(trace: Trace, scenario, out_dir, report: Optional[Dict] = None) -> Path:
    """trace.csv, events.csv, scenario.json and (when given) report.json"""
    out_dir = trace.save(out_dir)
    (out_dir / SCENARIO_FILE).write_text(json.dumps(scenario.resolved_source(), indent=2, sort_keys=True))
    if report is not None:
        (out_dir / REPORT_FILE).write_text(json.dumps(report, indent=2, default=_json_default))
    return out_dir


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"{type(value).__name__} is not JSON serializable")
