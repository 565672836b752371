#!/usr/bin/env python3
"""
Agent dynamics for the sampled-data closed loop.

Heterogeneous control-affine agents x_i' = f_i(x_i) + g_i(x_i) u_i + phi_i(t),
bounded disturbance processes, and a fixed-step RK4 integrator that holds every
agent's input constant across the interval (zero-order hold).
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from cbf_errors import EmptyBoundingBox, InputOutOfBounds, NonFiniteState
from polytope import PolytopeSpec, contains, instantiate, unicycle_io_bounds, unicycle_io_matrix, vertices

logger = logging.getLogger(__name__)

MEMBERSHIP_TOL = 1e-8
FLOW_SAFETY_FACTOR = 1.1


class Role(Enum):
    """Agent behaviour class"""
    NORMAL = "normal"
    ADVERSARIAL = "adversarial"


@dataclass
class AgentModel:
    """Control-affine agent model with output (position) map"""
    id: int
    state_dim: int
    input_dim: int
    drift: Callable[[np.ndarray], np.ndarray]
    actuation: Callable[[np.ndarray], np.ndarray]
    disturbance_bound: float
    input_set: PolytopeSpec
    role: Role = Role.NORMAL
    kind: str = "custom"
    output_matrix: Optional[np.ndarray] = None
    output_map: Optional[Callable[[np.ndarray], np.ndarray]] = None
    output_jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    drift_jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    params: Dict = field(default_factory=dict)

    def __post_init__(self):
        if self.state_dim < 1 or self.input_dim < 1:
            raise ValueError(f"agent {self.id}: state and input dimensions must be >= 1")
        if self.disturbance_bound < 0:
            raise ValueError(f"agent {self.id}: disturbance bound must be >= 0")
        if self.output_matrix is None and self.output_map is None:
            self.output_matrix = np.eye(self.state_dim)

    @property
    def is_adversarial(self) -> bool:
        return self.role == Role.ADVERSARIAL

    @property
    def linear_output(self) -> bool:
        return self.output_map is None

    @property
    def output_dim(self) -> int:
        if self.output_map is None:
            return self.output_matrix.shape[0]
        return int(self.params.get("output_dim", 2))

    def position(self, x_i: np.ndarray) -> np.ndarray:
        if self.output_map is None:
            return self.output_matrix @ x_i
        return self.output_map(x_i)

    def position_jacobian(self, x_i: np.ndarray) -> np.ndarray:
        if self.output_map is None:
            return self.output_matrix
        return self.output_jacobian(x_i)

    def flow(self, x_i: np.ndarray, u_i: np.ndarray) -> np.ndarray:
        return self.drift(x_i) + self.actuation(x_i) @ u_i

    def with_role(self, role: Role) -> "AgentModel":
        return replace(self, role=role)


def single_integrator(agent_id: int, dim: int, input_set: PolytopeSpec,
                      disturbance_bound: float = 0.0, role: Role = Role.NORMAL) -> AgentModel:
    zeros = np.zeros(dim)
    eye = np.eye(dim)
    return AgentModel(
        id=agent_id, state_dim=dim, input_dim=dim,
        drift=lambda x: zeros.copy(), actuation=lambda x: eye,
        disturbance_bound=disturbance_bound, input_set=input_set, role=role,
        kind="single_integrator", output_matrix=eye,
        drift_jacobian=lambda x: np.zeros((dim, dim)),
    )


def double_integrator(agent_id: int, dim: int, input_set: PolytopeSpec, beta: float = 0.0,
                      disturbance_bound: float = 0.0, role: Role = Role.NORMAL) -> AgentModel:
    """State (p, v) with p' = v, v' = -beta v + u"""
    n = 2 * dim
    A = np.zeros((n, n))
    A[:dim, dim:] = np.eye(dim)
    A[dim:, dim:] = -beta * np.eye(dim)
    B = np.zeros((n, dim))
    B[dim:, :] = np.eye(dim)
    C = np.hstack([np.eye(dim), np.zeros((dim, dim))])
    return AgentModel(
        id=agent_id, state_dim=n, input_dim=dim,
        drift=lambda x: A @ x, actuation=lambda x: B,
        disturbance_bound=disturbance_bound, input_set=input_set, role=role,
        kind="double_integrator", output_matrix=C,
        drift_jacobian=lambda x: A, params={"beta": beta, "dim": dim},
    )


def unicycle_io(agent_id: int, b_offset: float, nu_max: float, omega_max: float,
                disturbance_bound: float = 0.0, role: Role = Role.NORMAL) -> AgentModel:
    """
    Unicycle (x1, x2, theta) driven through its look-ahead point
    p = (x1 + b cos theta, x2 + b sin theta). The model input is the output
    velocity u, so p' = u and (nu, omega) = T(theta) u.
    """

    def actuation(x):
        c, s = math.cos(x[2]), math.sin(x[2])
        body = np.array([[c, 0.0], [s, 0.0], [0.0, 1.0]])
        return body @ unicycle_io_matrix(x[2], b_offset)

    def output_map(x):
        return np.array([x[0] + b_offset * math.cos(x[2]), x[1] + b_offset * math.sin(x[2])])

    def output_jacobian(x):
        return np.array([[1.0, 0.0, -b_offset * math.sin(x[2])],
                         [0.0, 1.0, b_offset * math.cos(x[2])]])

    return AgentModel(
        id=agent_id, state_dim=3, input_dim=2,
        drift=lambda x: np.zeros(3), actuation=actuation,
        disturbance_bound=disturbance_bound,
        input_set=unicycle_io_bounds(b_offset, nu_max, omega_max), role=role,
        kind="unicycle", output_map=output_map, output_jacobian=output_jacobian,
        drift_jacobian=lambda x: np.zeros((3, 3)),
        params={"b_offset": b_offset, "nu_max": nu_max, "omega_max": omega_max, "output_dim": 2},
    )


@dataclass(frozen=True)
class StateLayout:
    """Offsets of each agent's block inside the stacked state"""
    offsets: Tuple[int, ...]
    dims: Tuple[int, ...]

    @classmethod
    def from_models(cls, models: Sequence[AgentModel]) -> "StateLayout":
        offsets, total = [], 0
        for model in models:
            offsets.append(total)
            total += model.state_dim
        return cls(tuple(offsets), tuple(m.state_dim for m in models))

    @property
    def total(self) -> int:
        return sum(self.dims)

    def slice(self, i: int) -> slice:
        return slice(self.offsets[i], self.offsets[i] + self.dims[i])

    def split(self, x_bar: np.ndarray) -> List[np.ndarray]:
        return [x_bar[self.slice(i)] for i in range(len(self.dims))]


@dataclass
class SystemState:
    """Stacked state plus the inputs currently held by each agent"""
    time: float
    x: np.ndarray
    held_inputs: List[np.ndarray]

    def copy(self) -> "SystemState":
        return SystemState(self.time, self.x.copy(), [u.copy() for u in self.held_inputs])


class DisturbanceKind(Enum):
    NONE = "none"
    PIECEWISE_CONSTANT = "piecewise_constant"
    SINUSOIDAL = "sinusoidal"


@dataclass
class DisturbanceProcess:
    """
    Bounded additive disturbance, one independent stream per agent.
    Values are a pure function of (seed, agent, time); a small cache avoids
    rebuilding generators inside RK4 stages.
    """
    kind: DisturbanceKind = DisturbanceKind.NONE
    bounds: Sequence[float] = ()
    resample_dt: float = 0.05
    frequencies: Sequence[float] = (0.4, 1.1, 2.3)
    rng_seed: int = 0
    _cache: Dict = field(default_factory=dict, repr=False, compare=False)

    def bound(self, agent: int) -> float:
        return float(self.bounds[agent]) if agent < len(self.bounds) else 0.0

    def value(self, agent: int, t: float, dim: int) -> np.ndarray:
        phi_max = self.bound(agent)
        if self.kind == DisturbanceKind.NONE or phi_max == 0.0:
            return np.zeros(dim)
        if self.kind == DisturbanceKind.PIECEWISE_CONSTANT:
            bucket = int(math.floor(t / self.resample_dt))
            cached = self._cache.get(agent)
            if cached is not None and cached[0] == bucket:
                return cached[1]
            rng = np.random.default_rng([self.rng_seed, 1, agent, bucket])
            direction = rng.standard_normal(dim)
            direction /= max(np.linalg.norm(direction), 1e-300)
            vec = direction * rng.uniform(0.0, phi_max)
            self._cache[agent] = (bucket, vec)
            return vec
        phases = self._cache.get(("phase", agent))
        if phases is None:
            phases = np.random.default_rng([self.rng_seed, 2, agent]).uniform(0.0, 2 * np.pi, dim)
            self._cache[("phase", agent)] = phases
        freqs = np.array([self.frequencies[k % len(self.frequencies)] for k in range(dim)])
        return phi_max / math.sqrt(dim) * np.sin(2 * np.pi * freqs * t + phases)


def _stacked_derivative(t, x, models, layout, held_inputs, disturbance):
    dx = np.empty_like(x)
    for i, model in enumerate(models):
        sl = layout.slice(i)
        x_i = x[sl]
        dx[sl] = model.flow(x_i, held_inputs[i]) + disturbance.value(i, t, model.state_dim)
    return dx


def integrate_interval(state: SystemState, held_inputs: Sequence[np.ndarray],
                       disturbance: DisturbanceProcess, t_end: float, dt_max: float,
                       models: Sequence[AgentModel],
                       on_step: Optional[Callable[[float, np.ndarray], None]] = None) -> SystemState:
    """
    Advance the stacked state to t_end with fixed-step RK4, inputs held.
    on_step(t, x) is called after every RK4 step.
    """
    if t_end < state.time:
        raise ValueError(f"t_end {t_end} precedes state time {state.time}")
    held = [np.asarray(u, dtype=float) for u in held_inputs]
    if t_end == state.time:
        return SystemState(state.time, state.x.copy(), [u.copy() for u in held])
    for model, u in zip(models, held):
        if model.input_set.is_constant:
            A, b = instantiate(model.input_set)
            if not contains(A, b, u, MEMBERSHIP_TOL * (1.0 + np.max(np.abs(b)))):
                raise InputOutOfBounds(f"agent {model.id}: held input {u} outside its input set")

    layout = StateLayout.from_models(models)
    gap = t_end - state.time
    steps = max(1, int(math.ceil(gap / dt_max - 1e-9)))
    h = gap / steps
    x = state.x.astype(float).copy()
    t = state.time
    for k in range(steps):
        k1 = _stacked_derivative(t, x, models, layout, held, disturbance)
        k2 = _stacked_derivative(t + h / 2, x + h / 2 * k1, models, layout, held, disturbance)
        k3 = _stacked_derivative(t + h / 2, x + h / 2 * k2, models, layout, held, disturbance)
        k4 = _stacked_derivative(t + h, x + h * k3, models, layout, held, disturbance)
        x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        t = t_end if k == steps - 1 else state.time + (k + 1) * h
        if not np.all(np.isfinite(x)):
            raise NonFiniteState(f"non-finite state at t={t:.6f}")
        if on_step is not None:
            on_step(t, x)
    return SystemState(t_end, x, [u.copy() for u in held])


def max_flow_speed(scenario, sample_count: int = 2000, rng_seed: int = 0) -> float:
    """
    Sampled bound mu on ||x_bar'|| over the scenario's state box:
    1.1 * (max ||stacked f + g u|| + sum of disturbance bounds).
    """
    bounds = scenario.state_bounds()
    if bounds is None:
        raise EmptyBoundingBox(f"scenario {getattr(scenario, 'name', '?')} has no state bounds")
    lo, hi = bounds
    models = scenario.models
    layout = StateLayout.from_models(models)
    rng = np.random.default_rng(rng_seed)
    best = 0.0
    for _ in range(sample_count):
        x_bar = rng.uniform(lo, hi)
        flows = []
        for i, model in enumerate(models):
            x_i = x_bar[layout.slice(i)]
            verts = vertices(model.input_set, x_i)
            if rng.random() < 0.5:
                u = verts[rng.integers(verts.shape[0])]
            else:
                u = rng.dirichlet(np.ones(verts.shape[0])) @ verts
            flows.append(model.flow(x_i, u))
        best = max(best, float(np.linalg.norm(np.concatenate(flows))))
    phi_sum = sum(m.disturbance_bound for m in models)
    mu = FLOW_SAFETY_FACTOR * (best + phi_sum)
    logger.debug(f"max_flow_speed: sup={best:.4f}, phi_sum={phi_sum:.4f}, mu={mu:.4f}")
    return mu
