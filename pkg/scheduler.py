#!/usr/bin/env python3
"""
Asynchronous sampling schedules and the event loop.

Each agent samples at t_i^{k+1} = t_i^k + Gamma_i + delta_i(k) with bounded
jitter. At every event the world is integrated up to the event time, the
sampling agent computes and holds a new input, and normal agents broadcast it.
"""

import heapq
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from cbf_errors import JitterExceedsPeriod
from controllers import AgentController, BroadcastTable, FilterContext
from dynamics import AgentModel, DisturbanceProcess, Role, SystemState, integrate_interval
from solvers import SolveStatus

logger = logging.getLogger(__name__)


@dataclass
class SampleSchedule:
    """Per-agent nominal period and uniform jitter bound"""
    periods: List[float]
    jitters: List[float]
    rng_seed: int = 0
    synchronous: bool = False

    @classmethod
    def uniform(cls, n_agents: int, period: float, jitter: float = 0.0, rng_seed: int = 0,
                synchronous: bool = False) -> "SampleSchedule":
        return cls([period] * n_agents, [0.0 if synchronous else jitter] * n_agents, rng_seed, synchronous)

    @property
    def max_period(self) -> float:
        return max(self.periods)

    @property
    def max_jitter(self) -> float:
        return max(self.jitters) if self.jitters else 0.0


def generate_schedule(schedule: SampleSchedule, horizon: float) -> List[np.ndarray]:
    """Sampling times in [0, horizon) per agent; every stream starts at t=0"""
    streams = []
    for i, (period, jitter) in enumerate(zip(schedule.periods, schedule.jitters)):
        if period <= 0:
            raise ValueError(f"agent {i}: period must be positive")
        if jitter >= period:
            raise JitterExceedsPeriod(f"agent {i}: jitter {jitter} >= period {period}")
        count = int(np.ceil(horizon / max(period - jitter, 1e-12))) + 1
        k = np.arange(count, dtype=float)
        if jitter > 0 and not schedule.synchronous:
            rng = np.random.default_rng([schedule.rng_seed, 0, i])
            deltas = rng.uniform(-jitter, jitter, count)
            offsets = np.concatenate([[0.0], np.cumsum(deltas[:-1])])
            times = k * period + offsets
        else:
            times = k * period
        streams.append(times[times < horizon])
    return streams


class EventQueue:
    """Time-ordered (time, agent) events; ties pop in ascending agent id"""

    def __init__(self, streams: Optional[Sequence[np.ndarray]] = None):
        self._heap: List[Tuple[float, int]] = []
        if streams is not None:
            for agent, times in enumerate(streams):
                for t in times:
                    self._heap.append((float(t), agent))
            heapq.heapify(self._heap)

    def push(self, time: float, agent: int):
        heapq.heappush(self._heap, (float(time), agent))

    def pop(self) -> Tuple[float, int]:
        return heapq.heappop(self._heap)

    def peek(self) -> Tuple[float, int]:
        return self._heap[0]

    def __len__(self) -> int:
        return len(self._heap)


@dataclass
class EventRecord:
    time: float
    agent: int
    x: np.ndarray
    u: np.ndarray
    status: SolveStatus
    slack: float
    level_value: float


@dataclass
class World:
    """Mutable simulation world advanced by step_event"""
    state: SystemState
    models: Sequence[AgentModel]
    controllers: Dict[int, AgentController]
    context: FilterContext
    disturbance: DisturbanceProcess
    dt_max: float
    broadcast: BroadcastTable
    adversary_broadcast: Optional[BroadcastTable] = None
    on_step: Optional[Callable[[float, np.ndarray], None]] = None
    on_event: Optional[Callable[[EventRecord], None]] = None
    fallback_counts: Dict[int, int] = field(default_factory=dict)

    def advance_to(self, t: float):
        if t > self.state.time:
            self.state = integrate_interval(self.state, self.state.held_inputs, self.disturbance,
                                            t, self.dt_max, self.models, on_step=self.on_step)


def step_event(queue: EventQueue, world: World) -> World:
    """Integrate to the next event, let the sampling agent decide, hold and broadcast"""
    t, agent = queue.pop()
    world.advance_to(t)
    x_bar = world.state.x.copy()
    controller = world.controllers[agent]
    decision = controller.decide(world.context, x_bar, t, world.broadcast, world.adversary_broadcast)
    u = np.asarray(decision.u, dtype=float)
    world.state.held_inputs[agent] = u
    model = world.models[agent]
    if model.role == Role.NORMAL:
        world.broadcast.publish(agent, u, t)
    elif world.adversary_broadcast is not None:
        world.adversary_broadcast.publish(agent, u, t)

    if decision.status != SolveStatus.OPTIMAL:
        seen = world.fallback_counts.get(agent, 0)
        if seen == 0:
            logger.warning(f"⚠️ agent {agent} {decision.status.value} at t={t:.4f}")
        world.fallback_counts[agent] = seen + 1

    if world.on_event is not None:
        world.on_event(EventRecord(t, agent, x_bar, u.copy(), decision.status,
                                   decision.slack, decision.level_value))
    return world
