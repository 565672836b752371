#!/usr/bin/env python3
"""
Control policies for normal and adversarial agents.

Normal agents pass a nominal tracking input through a safety filter QP whose
single safety row charges every adversary with its worst-case contribution
gamma_max and tightens by the sampled-data margin. When the row cannot be met
inside the input polytope, the agent applies its best-effort arg-min input.
"""

import logging
import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import block_diag

from barrier import ComposedBarrier, PsiCascade
from cbf_errors import TimeOutOfRangeWarning
from dynamics import AgentModel, Role, StateLayout
from margins import MarginConfig, eta, eta_prime
from polytope import instantiate, unicycle_io_matrix
from solvers import (GammaDirection, QpProblem, SolveStatus, gamma_value, polytope_lp,
                     solve_qp, umax_point)

logger = logging.getLogger(__name__)

ROW_TOL = 1e-9


class NominalKind(Enum):
    FORMATION_BEZIER = "formation_bezier"
    PURSUIT_PD = "pursuit_pd"
    ZERO = "zero"


class ControllerKind(Enum):
    NORMAL_CENTRALIZED = "normal_centralized"
    NORMAL_DISTRIBUTED = "normal_distributed"
    NORMAL_HIGH_ORDER = "normal_high_order"
    ADVERSARIAL_MAX = "adversarial_max"
    NOMINAL_ONLY = "nominal_only"


@dataclass
class BezierTrajectory:
    """
    Cubic Bezier formation centre with s(t) = (tf - t) / (tf - t0), weighting
    control point k by C(3,k) (1-s)^k s^(3-k): the curve starts at beta_0 and
    ends at beta_3.
    """
    control_points: np.ndarray
    t0: float
    tf: float

    def __post_init__(self):
        self.control_points = np.asarray(self.control_points, dtype=float)
        if self.control_points.shape[0] != 4:
            raise ValueError("cubic Bezier needs exactly 4 control points")
        if self.tf <= self.t0:
            raise ValueError("tf must exceed t0")

    def _phase(self, t: float) -> Tuple[float, bool]:
        if t < self.t0 or t > self.tf:
            warnings.warn(f"Bezier queried at t={t:.4f} outside [{self.t0}, {self.tf}]; clamped",
                          TimeOutOfRangeWarning, stacklevel=3)
            t = min(max(t, self.t0), self.tf)
            return (t - self.t0) / (self.tf - self.t0), False
        return (t - self.t0) / (self.tf - self.t0), True

    def s(self, t: float) -> float:
        return (self.tf - t) / (self.tf - self.t0)

    def position(self, t: float) -> np.ndarray:
        a, _ = self._phase(t)
        b = self.control_points
        return ((1 - a) ** 3 * b[0] + 3 * a * (1 - a) ** 2 * b[1]
                + 3 * a ** 2 * (1 - a) * b[2] + a ** 3 * b[3])

    def velocity(self, t: float) -> np.ndarray:
        a, inside = self._phase(t)
        if not inside:
            return np.zeros(self.control_points.shape[1])
        b = self.control_points
        d = 3 * ((1 - a) ** 2 * (b[1] - b[0]) + 2 * a * (1 - a) * (b[2] - b[1]) + a ** 2 * (b[3] - b[2]))
        return d / (self.tf - self.t0)

    def acceleration(self, t: float) -> np.ndarray:
        a, inside = self._phase(t)
        if not inside:
            return np.zeros(self.control_points.shape[1])
        b = self.control_points
        dd = 6 * ((1 - a) * (b[2] - 2 * b[1] + b[0]) + a * (b[3] - 2 * b[2] + b[1]))
        return dd / (self.tf - self.t0) ** 2


@dataclass
class NominalPolicy:
    kind: NominalKind = NominalKind.ZERO
    trajectory: Optional[BezierTrajectory] = None
    offset: Optional[np.ndarray] = None
    k1: float = 1.0
    k2: Optional[float] = None
    order: int = 1
    target: Optional[int] = None
    literal_paper_sign: bool = False

    @property
    def gain_v(self) -> float:
        return 2.0 * math.sqrt(self.k1) if self.k2 is None else self.k2


def _velocity(model: AgentModel, x: np.ndarray) -> np.ndarray:
    if model.kind == "double_integrator":
        return x[model.output_dim:]
    return np.zeros(model.output_dim)


def _closest_normal(model: AgentModel, x_bar, models, layout) -> int:
    p = model.position(x_bar[layout.slice(model.id)])
    best, best_d = None, np.inf
    for other in models:
        if other.role != Role.NORMAL or other.id == model.id:
            continue
        d = np.linalg.norm(other.position(x_bar[layout.slice(other.id)]) - p)
        if d < best_d:
            best, best_d = other.id, d
    return best


def nominal_input(policy: NominalPolicy, x_i: np.ndarray, t: float, model: AgentModel,
                  x_bar: Optional[np.ndarray] = None,
                  models: Optional[Sequence[AgentModel]] = None) -> np.ndarray:
    """Tracking input for formation or pursuit; zero for the ZERO policy"""
    if policy.kind == NominalKind.ZERO:
        return np.zeros(model.input_dim)
    p = model.position(x_i)
    v = _velocity(model, x_i)

    if policy.kind == NominalKind.FORMATION_BEZIER:
        offset = np.zeros_like(p) if policy.offset is None else np.asarray(policy.offset)
        p_d = policy.trajectory.position(t) + offset
        v_d = policy.trajectory.velocity(t)
        if policy.order == 1:
            feedback, feedforward = policy.k1 * (p_d - p), v_d
        else:
            feedback = policy.k1 * (p_d - p) + policy.gain_v * (v_d - v)
            feedforward = policy.trajectory.acceleration(t)
        if policy.literal_paper_sign:
            return -feedback - feedforward
        return feedback + feedforward

    layout = StateLayout.from_models(models)
    target = policy.target if policy.target is not None else _closest_normal(model, x_bar, models, layout)
    if target is None:
        return np.zeros(model.input_dim)
    target_model = models[target]
    x_t = x_bar[layout.slice(target)]
    u = policy.k1 * (target_model.position(x_t) - p)
    if policy.order == 2:
        u = u + policy.gain_v * (_velocity(target_model, x_t) - v)
    return u


class BroadcastTable:
    """Most recent input each receiver holds for each sender, with its timestamp"""

    def __init__(self, members: Sequence[AgentModel]):
        self.members = [m.id for m in members]
        self._entries: Dict[Tuple[int, int], Tuple[np.ndarray, float]] = {}
        for receiver in self.members:
            for sender in members:
                if sender.id != receiver:
                    self._entries[(receiver, sender.id)] = (np.zeros(sender.input_dim), 0.0)

    def publish(self, sender: int, u: np.ndarray, t: float):
        for receiver in self.members:
            if receiver != sender:
                self._entries[(receiver, sender)] = (np.array(u, dtype=float), t)

    def latest(self, receiver: int, sender: int) -> Tuple[np.ndarray, float]:
        return self._entries[(receiver, sender)]

    def inputs_for(self, receiver: int) -> Dict[int, np.ndarray]:
        return {s: u for (r, s), (u, _) in self._entries.items() if r == receiver}

    def max_age(self, receiver: int, now: float) -> float:
        ages = [now - ts for (r, _), (_, ts) in self._entries.items() if r == receiver]
        return max(ages) if ages else 0.0


@dataclass
class SafetyRow:
    """coefficient . u <= rhs for the deciding agent(s)"""
    coefficient: np.ndarray
    rhs: float

    def slack(self, u: np.ndarray) -> float:
        return float(self.rhs - self.coefficient @ u)


@dataclass
class ControlDecision:
    u: np.ndarray
    status: SolveStatus
    slack: float = np.inf
    level_value: float = np.nan
    row: Optional[SafetyRow] = None


def _row_constant(terms, level, x_bar, models, agents_with_known_input, known_inputs,
                  adversarial, alpha, margin_value) -> float:
    constant = 0.0
    for l in agents_with_known_input:
        constant += terms.lf[l]
        if l in known_inputs:
            constant += float(terms.lg[l] @ known_inputs[l])
    for j in adversarial:
        constant += gamma_value(models[j], level, x_bar, GammaDirection.MAX, terms)
    return constant + alpha(terms.value) + margin_value


def project_to_input_set(model: AgentModel, x_i: np.ndarray, u: np.ndarray) -> np.ndarray:
    A, b = instantiate(model.input_set, x_i)
    res = solve_qp(QpProblem(u, A, b))
    return res.x if res.ok else u


def _filter_agent(agent: int, x_bar: np.ndarray, known_inputs: Dict[int, np.ndarray],
                  models: Sequence[AgentModel], level, alpha, margin_value: float,
                  u_nom: np.ndarray, cooperative: Sequence[int],
                  adversarial: Sequence[int]) -> ControlDecision:
    model = models[agent]
    layout = level.layout
    x_i = x_bar[layout.slice(agent)]
    terms = level.lie_terms(x_bar)
    others = [l for l in cooperative if l != agent]
    constant = terms.lf[agent] + _row_constant(terms, level, x_bar, models, others, known_inputs,
                                               adversarial, alpha, margin_value)
    row = SafetyRow(terms.lg[agent], -constant)

    best = polytope_lp(model.input_set, x_i, row.coefficient)
    u_min = best.x
    if row.coefficient @ u_min > row.rhs + ROW_TOL * (1.0 + abs(row.rhs)):
        logger.debug(f"agent {agent}: row infeasible (min {row.coefficient @ u_min:.4g} > {row.rhs:.4g})")
        return ControlDecision(u_min, SolveStatus.FALLBACK, row.slack(u_min), terms.value, row)

    A, b = instantiate(model.input_set, x_i)
    res = solve_qp(QpProblem(u_nom, np.vstack([A, row.coefficient]), np.append(b, row.rhs), start=u_min))
    if res.status == SolveStatus.OPTIMAL:
        return ControlDecision(res.x, SolveStatus.OPTIMAL, row.slack(res.x), terms.value, row)
    if res.status == SolveStatus.INFEASIBLE:
        return ControlDecision(u_min, SolveStatus.FALLBACK, row.slack(u_min), terms.value, row)
    logger.warning(f"⚠️ agent {agent}: QP {res.status.value}, applying best-effort input")
    return ControlDecision(u_min, SolveStatus.NUMERICAL_FAILURE, row.slack(u_min), terms.value, row)


def _roles(models, cooperative, adversarial):
    if cooperative is None:
        cooperative = [m.id for m in models if m.role == Role.NORMAL]
    if adversarial is None:
        adversarial = [m.id for m in models if m.role == Role.ADVERSARIAL]
    return list(cooperative), list(adversarial)


def distributed_filter(agent: int, x_bar: np.ndarray, broadcast: Optional[BroadcastTable],
                       models: Sequence[AgentModel], barrier: ComposedBarrier, margin: MarginConfig,
                       u_nom: np.ndarray, *, alpha, interval: float,
                       cooperative: Optional[Sequence[int]] = None,
                       adversarial: Optional[Sequence[int]] = None,
                       margin_value: Optional[float] = None) -> ControlDecision:
    """Agent-local QP using the last broadcast inputs of the other normal agents"""
    cooperative, adversarial = _roles(models, cooperative, adversarial)
    if not barrier.atoms:
        return ControlDecision(project_to_input_set(models[agent], x_bar[barrier.layout.slice(agent)], u_nom),
                               SolveStatus.OPTIMAL)
    known = broadcast.inputs_for(agent) if broadcast is not None else {}
    value = eta(margin, interval) if margin_value is None else margin_value
    return _filter_agent(agent, x_bar, known, models, barrier, alpha, value, u_nom, cooperative, adversarial)


def high_order_filter(agent: int, x_bar: np.ndarray, broadcast: Optional[BroadcastTable],
                      cascade: PsiCascade, margin: MarginConfig, u_nom: np.ndarray, *,
                      interval: float, cooperative: Optional[Sequence[int]] = None,
                      adversarial: Optional[Sequence[int]] = None,
                      margin_value: Optional[float] = None) -> ControlDecision:
    """Distributed filter on psi_{q-1} with alpha_q and eta' instead of h, alpha, eta"""
    models = cascade.models
    if cascade.order == 1:
        return distributed_filter(agent, x_bar, broadcast, models, cascade.barrier, margin, u_nom,
                                  alpha=cascade.alphas[0], interval=interval, cooperative=cooperative,
                                  adversarial=adversarial, margin_value=margin_value)
    cooperative, adversarial = _roles(models, cooperative, adversarial)
    if not cascade.barrier.atoms:
        return ControlDecision(project_to_input_set(models[agent], x_bar[cascade.layout.slice(agent)], u_nom),
                               SolveStatus.OPTIMAL)
    known = broadcast.inputs_for(agent) if broadcast is not None else {}
    value = eta_prime(margin, interval) if margin_value is None else margin_value
    return _filter_agent(agent, x_bar, known, models, cascade, cascade.alphas[-1], value, u_nom,
                         cooperative, adversarial)


@dataclass
class CentralizedDecision:
    inputs: Dict[int, np.ndarray]
    status: SolveStatus
    slack: float
    level_value: float


def centralized_filter(x_bar: np.ndarray, models: Sequence[AgentModel], barrier: ComposedBarrier,
                       margin: MarginConfig, u_nom: Dict[int, np.ndarray], *, alpha,
                       interval: float, margin_value: Optional[float] = None) -> CentralizedDecision:
    """Joint QP over all normal inputs with one safety row"""
    cooperative, adversarial = _roles(models, None, None)
    layout = barrier.layout
    terms = barrier.lie_terms(x_bar)
    value = eta(margin, interval) if margin_value is None else margin_value
    constant = sum(terms.lf[i] for i in cooperative) + _row_constant(
        terms, barrier, x_bar, models, [], {}, adversarial, alpha, value)
    coefficient = np.concatenate([terms.lg[i] for i in cooperative])
    row = SafetyRow(coefficient, -constant)

    u_min = {i: polytope_lp(models[i].input_set, x_bar[layout.slice(i)], terms.lg[i]).x for i in cooperative}
    start = np.concatenate([u_min[i] for i in cooperative])
    if coefficient @ start > row.rhs + ROW_TOL * (1.0 + abs(row.rhs)):
        return CentralizedDecision(u_min, SolveStatus.FALLBACK, row.slack(start), terms.value)

    blocks = [instantiate(models[i].input_set, x_bar[layout.slice(i)]) for i in cooperative]
    A = block_diag(*[blk[0] for blk in blocks])
    b = np.concatenate([blk[1] for blk in blocks])
    target = np.concatenate([np.asarray(u_nom[i], dtype=float) for i in cooperative])
    res = solve_qp(QpProblem(target, np.vstack([A, coefficient]), np.append(b, row.rhs), start=start))
    if res.status != SolveStatus.OPTIMAL:
        status = SolveStatus.FALLBACK if res.status == SolveStatus.INFEASIBLE else res.status
        return CentralizedDecision(u_min, status, row.slack(start), terms.value)
    inputs, offset = {}, 0
    for i in cooperative:
        inputs[i] = res.x[offset:offset + models[i].input_dim]
        offset += models[i].input_dim
    return CentralizedDecision(inputs, SolveStatus.OPTIMAL, row.slack(res.x), terms.value)


def adversarial_input(model: AgentModel, barrier, x_bar: np.ndarray, terms=None) -> np.ndarray:
    """Input maximizing the adversary's contribution to h'"""
    if model.role != Role.ADVERSARIAL:
        raise ValueError(f"agent {model.id} is not adversarial")
    return umax_point(model, barrier, x_bar, terms)


def unicycle_io(u_output: np.ndarray, theta: float, b_offset: float) -> Tuple[float, float]:
    """(nu, omega) realising the output velocity"""
    nu, omega = unicycle_io_matrix(theta, b_offset) @ np.asarray(u_output, dtype=float)
    return float(nu), float(omega)


def unicycle_io_inverse(nu: float, omega: float, theta: float, b_offset: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([c * nu - b_offset * s * omega, s * nu + b_offset * c * omega])


@dataclass
class FilterContext:
    """Everything a controller needs besides the sampled state"""
    models: Sequence[AgentModel]
    barrier: ComposedBarrier
    cascade: Optional[PsiCascade]
    alphas: Sequence
    margin: MarginConfig
    intervals: Sequence[float]
    adversary_cascade: Optional[PsiCascade] = None
    adversary_margin: float = 0.0
    controllers: Dict[int, "AgentController"] = field(default_factory=dict)
    central_cache: Dict[float, "CentralizedDecision"] = field(default_factory=dict, repr=False)

    @property
    def normal(self) -> List[int]:
        return [m.id for m in self.models if m.role == Role.NORMAL]

    @property
    def adversarial(self) -> List[int]:
        return [m.id for m in self.models if m.role == Role.ADVERSARIAL]


@dataclass
class AgentController:
    agent: int
    kind: ControllerKind
    nominal: NominalPolicy = field(default_factory=NominalPolicy)
    neighbor_radius: Optional[float] = None
    self_filter: bool = False

    def _local(self, level, x_bar):
        if self.neighbor_radius is None:
            return level
        if isinstance(level, PsiCascade):
            return level.with_barrier(level.barrier.restricted_to(self.agent, x_bar, self.neighbor_radius))
        return level.restricted_to(self.agent, x_bar, self.neighbor_radius)

    def decide(self, ctx: FilterContext, x_bar: np.ndarray, t: float,
               broadcast: Optional[BroadcastTable],
               adversary_broadcast: Optional[BroadcastTable] = None) -> ControlDecision:
        models = ctx.models
        model = models[self.agent]
        layout = ctx.barrier.layout
        x_i = x_bar[layout.slice(self.agent)]

        if self.kind == ControllerKind.ADVERSARIAL_MAX:
            level = ctx.cascade if ctx.cascade is not None and ctx.cascade.order > 1 else ctx.barrier
            return ControlDecision(adversarial_input(model, level, x_bar), SolveStatus.OPTIMAL)

        u_nom = nominal_input(self.nominal, x_i, t, model, x_bar, models)
        interval = ctx.intervals[self.agent]

        if self.kind == ControllerKind.NOMINAL_ONLY:
            if self.self_filter and ctx.adversary_cascade is not None:
                group = [m.id for m in models if m.role == model.role]
                local = self._local(ctx.adversary_cascade, x_bar)
                return high_order_filter(self.agent, x_bar, adversary_broadcast, local, ctx.margin, u_nom,
                                         interval=interval, cooperative=group, adversarial=[],
                                         margin_value=ctx.adversary_margin)
            return ControlDecision(project_to_input_set(model, x_i, u_nom), SolveStatus.OPTIMAL)

        if self.kind == ControllerKind.NORMAL_CENTRALIZED:
            cached = ctx.central_cache.get(t)
            if cached is None:
                nominals = {}
                for i in ctx.normal:
                    peer = ctx.controllers.get(i)
                    policy = peer.nominal if peer is not None else NominalPolicy()
                    nominals[i] = nominal_input(policy, x_bar[layout.slice(i)], t, models[i], x_bar, models)
                cached = centralized_filter(x_bar, models, ctx.barrier, ctx.margin, nominals,
                                            alpha=ctx.alphas[0], interval=interval)
                ctx.central_cache = {t: cached}
            u = cached.inputs[self.agent]
            return ControlDecision(u, cached.status, cached.slack, cached.level_value)

        if self.kind == ControllerKind.NORMAL_HIGH_ORDER and ctx.cascade is not None:
            local = self._local(ctx.cascade, x_bar)
            return high_order_filter(self.agent, x_bar, broadcast, local, ctx.margin, u_nom, interval=interval)

        local = self._local(ctx.barrier, x_bar)
        return distributed_filter(self.agent, x_bar, broadcast, models, local, ctx.margin, u_nom,
                                  alpha=ctx.alphas[0], interval=interval)
