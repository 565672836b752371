#!/usr/bin/env python3
"""
Scenario configuration.

A scenario JSON file describes agents (dynamics, role, input bounds, initial
state, controller, nominal policy), the barrier (radii, obstacles, rho), the
alpha functions, margins, sampling schedule, disturbance and horizon. Units:
seconds for times, scenario length units for positions, length/second for
velocities and disturbance bounds.
"""

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from barrier import (AlphaFunction, BarrierAtom, ComposedBarrier, Obstacle, PsiCascade,
                     adversary_atoms, build_cascade, pairwise_atoms)
from cbf_errors import ScenarioError
from controllers import (AgentController, BezierTrajectory, ControllerKind, FilterContext,
                         NominalKind, NominalPolicy)
from dynamics import (AgentModel, DisturbanceKind, DisturbanceProcess, Role, double_integrator,
                      single_integrator, unicycle_io)
from margins import MarginConfig, estimated_margin, xi
from polytope import PolytopeSpec
from scheduler import SampleSchedule

logger = logging.getLogger(__name__)

OVERRIDE_KEYS = ("eta", "eta_prime", "xi", "horizon", "dt_max", "eta_zero_ablation", "literal_paper_sign")


def generate_obstacles(count: int, radius: float, lo: Sequence[float], hi: Sequence[float],
                       seed: int, clearance: float = 0.0, max_tries: int = 10_000) -> List[Obstacle]:
    """Rejection-sampled non-overlapping obstacles inside a box"""
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    placed: List[np.ndarray] = []
    for _ in range(max_tries):
        if len(placed) == count:
            break
        c = rng.uniform(lo, hi)
        if all(np.linalg.norm(c - p) >= 2 * radius + clearance for p in placed):
            placed.append(c)
    if len(placed) < count:
        raise ScenarioError(f"placed only {len(placed)} of {count} obstacles")
    return [Obstacle(tuple(float(v) for v in c), radius) for c in placed]


def _input_set(entry: Dict, dim: int) -> PolytopeSpec:
    if "input_box" in entry:
        lo, hi = entry["input_box"]
        return PolytopeSpec.box(lo, hi)
    if "input_halfspaces" in entry:
        return PolytopeSpec.halfspaces(entry["input_halfspaces"]["A"], entry["input_halfspaces"]["b"])
    bound = float(entry.get("input_bound", 1.0))
    return PolytopeSpec.symmetric_box([bound] * dim)


def build_model(agent_id: int, entry: Dict) -> AgentModel:
    role = Role(entry.get("role", "normal"))
    phi = float(entry.get("disturbance_bound", 0.0))
    kind = entry.get("type", "single_integrator")
    if kind == "single_integrator":
        dim = int(entry.get("dim", 2))
        return single_integrator(agent_id, dim, _input_set(entry, dim), phi, role)
    if kind == "double_integrator":
        dim = int(entry.get("dim", 3))
        return double_integrator(agent_id, dim, _input_set(entry, dim), float(entry.get("beta", 0.0)), phi, role)
    if kind == "unicycle":
        return unicycle_io(agent_id, float(entry["b_offset"]), float(entry["nu_max"]),
                           float(entry["omega_max"]), phi, role)
    raise ScenarioError(f"unknown agent type {kind!r}")


def _formation_offset(formation: Dict, slot: int, dim: int) -> np.ndarray:
    angle = 2 * math.pi * slot / int(formation["slots"])
    offset = np.zeros(dim)
    offset[0] = formation["radius"] * math.cos(angle)
    offset[1] = formation["radius"] * math.sin(angle)
    return offset


def build_nominal(entry: Dict, formation: Optional[Dict], model: AgentModel, literal: bool) -> NominalPolicy:
    data = entry.get("nominal", {"kind": "zero"})
    kind = NominalKind(data.get("kind", "zero"))
    order = int(data.get("order", 2 if model.kind == "double_integrator" else 1))
    policy = NominalPolicy(kind=kind, k1=float(data.get("k1", 1.0)), k2=data.get("k2"),
                           order=order, target=data.get("target"), literal_paper_sign=literal)
    if kind == NominalKind.FORMATION_BEZIER:
        if formation is None:
            raise ScenarioError("formation_bezier nominal needs a scenario-level formation block")
        policy.trajectory = BezierTrajectory(formation["control_points"], formation["t0"], formation["tf"])
        if "offset" in data:
            policy.offset = np.asarray(data["offset"], dtype=float)
        else:
            policy.offset = _formation_offset(formation, int(data.get("slot", model.id)), model.output_dim)
    return policy


def _default_bounds(model: AgentModel, entry: Dict, position_bounds) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    if "state_bounds" in entry:
        lo, hi = entry["state_bounds"]
        return np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    if position_bounds is None:
        return None
    p_lo, p_hi = float(position_bounds[0]), float(position_bounds[1])
    if model.kind == "unicycle":
        return np.array([p_lo, p_lo, -math.pi]), np.array([p_hi, p_hi, math.pi])
    if model.kind == "double_integrator":
        d = model.input_dim
        beta = model.params.get("beta", 0.0)
        u_bound = float(entry.get("input_bound", 1.0))
        v_bound = u_bound / beta if beta > 0 else float(entry.get("velocity_bound", 10.0))
        return (np.concatenate([np.full(d, p_lo), np.full(d, -v_bound)]),
                np.concatenate([np.full(d, p_hi), np.full(d, v_bound)]))
    return np.full(model.state_dim, p_lo), np.full(model.state_dim, p_hi)


@dataclass
class Scenario:
    """Complete, validated simulation description"""
    name: str
    models: List[AgentModel]
    initial_state: np.ndarray
    controllers: List[AgentController]
    agent_radii: List[float]
    obstacles: List[Obstacle]
    rho: float
    alphas: List[AlphaFunction]
    margin: MarginConfig
    schedule: SampleSchedule
    horizon: float
    dt_max: float = 1e-3
    disturbance_kind: DisturbanceKind = DisturbanceKind.NONE
    resample_dt: float = 0.05
    neighbor_radius: Optional[float] = None
    extra_atoms: List[BarrierAtom] = field(default_factory=list)
    include_pairs: bool = True
    agent_bounds: List[Optional[Tuple[np.ndarray, np.ndarray]]] = field(default_factory=list)
    flags: Dict[str, bool] = field(default_factory=dict)
    adversary_filter: Optional[Dict] = None
    description: str = ""
    source: Dict = field(default_factory=dict)
    _barrier: Optional[ComposedBarrier] = field(default=None, repr=False)
    _cascade: Optional[PsiCascade] = field(default=None, repr=False)

    @property
    def cascade_order(self) -> int:
        return len(self.alphas)

    @property
    def normal_ids(self) -> List[int]:
        return [m.id for m in self.models if m.role == Role.NORMAL]

    @property
    def adversarial_ids(self) -> List[int]:
        return [m.id for m in self.models if m.role == Role.ADVERSARIAL]

    @property
    def barrier(self) -> ComposedBarrier:
        if self._barrier is None:
            atoms = pairwise_atoms(self.models, self.agent_radii, self.obstacles) if self.include_pairs else []
            self._barrier = ComposedBarrier(atoms + list(self.extra_atoms), self.rho, self.models)
        return self._barrier

    @property
    def cascade(self) -> Optional[PsiCascade]:
        if self.cascade_order < 2:
            return None
        if self._cascade is None:
            self._cascade = build_cascade(self.barrier, self.alphas, xi(self.margin), self.models,
                                          state_bounds=self.state_bounds())
        return self._cascade

    def safety_level(self):
        """Function whose Lie derivatives enter the safety row, with its alpha"""
        if self.cascade_order >= 2:
            return self.cascade, self.alphas[-1]
        return self.barrier, self.alphas[0]

    def state_bounds(self) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        if not self.agent_bounds or any(b is None for b in self.agent_bounds):
            return None
        return (np.concatenate([b[0] for b in self.agent_bounds]),
                np.concatenate([b[1] for b in self.agent_bounds]))

    def intervals(self) -> List[float]:
        """Gamma_i + delta_max per agent"""
        return [p + self.schedule.max_jitter for p in self.schedule.periods]

    def effective_margin(self) -> MarginConfig:
        if self.flags.get("eta_zero_ablation"):
            return self.margin.with_overrides(override_eta=0.0, override_eta_prime=0.0)
        return self.margin

    def disturbance(self, seed: int) -> DisturbanceProcess:
        return DisturbanceProcess(self.disturbance_kind, [m.disturbance_bound for m in self.models],
                                  resample_dt=self.resample_dt, rng_seed=seed)

    def adversary_cascade(self) -> Optional[PsiCascade]:
        if self.adversary_filter is None:
            return None
        atoms = adversary_atoms(self.models, self.agent_radii, self.obstacles)
        alphas = [AlphaFunction.from_dict(a) for a in self.adversary_filter.get("alphas", [])] or self.alphas
        barrier = ComposedBarrier(atoms, self.rho, self.models)
        return PsiCascade(barrier, tuple(alphas), float(self.adversary_filter.get("xi", 0.0)))

    def filter_context(self) -> FilterContext:
        ctx = FilterContext(
            models=self.models, barrier=self.barrier, cascade=self.cascade, alphas=self.alphas,
            margin=self.effective_margin(), intervals=self.intervals(),
            adversary_cascade=self.adversary_cascade(),
            adversary_margin=float((self.adversary_filter or {}).get("margin", 0.0)),
        )
        ctx.controllers = {c.agent: c for c in self.controllers}
        return ctx

    def schedule_for_seed(self, seed: int) -> SampleSchedule:
        return SampleSchedule(list(self.schedule.periods), list(self.schedule.jitters), seed,
                              self.schedule.synchronous)

    def resolved_source(self) -> Dict:
        """Raw scenario with the margin constants actually used, so reloading skips estimation"""
        data = copy.deepcopy(self.source)
        margin = {k: v for k, v in self.margin.to_dict().items() if k != "provenance"}
        data["margin"] = {k: v for k, v in margin.items() if v is not None}
        return data

    def validate(self):
        h0 = self.barrier.value(self.initial_state) if self.barrier.atoms else -np.inf
        if h0 > 0:
            raise ScenarioError(f"{self.name}: initial state outside the safe set (h={h0:.4g})")
        cascade = self.cascade
        if cascade is not None:
            for j, value in enumerate(cascade.values(self.initial_state)):
                if value > 0:
                    raise ScenarioError(f"{self.name}: initial psi_{j}={value:.4g} > 0")
        for i, model in enumerate(self.models):
            if model.role == Role.ADVERSARIAL and self.controllers[i].kind in (
                    ControllerKind.NORMAL_CENTRALIZED, ControllerKind.NORMAL_DISTRIBUTED,
                    ControllerKind.NORMAL_HIGH_ORDER):
                raise ScenarioError(f"adversarial agent {i} cannot run a normal safety filter")


def apply_overrides(data: Dict, overrides: Dict[str, str]) -> Dict:
    """Return a copy of the raw scenario with CLI-style overrides applied"""
    data = copy.deepcopy(data)
    for key, raw in overrides.items():
        if key not in OVERRIDE_KEYS:
            raise ScenarioError(f"unknown override {key!r}; expected one of {OVERRIDE_KEYS}")
        margin = data.setdefault("margin", {})
        flags = data.setdefault("flags", {})
        if key == "eta":
            margin["override_eta"] = float(raw)
        elif key == "eta_prime":
            margin["override_eta_prime"] = float(raw)
        elif key == "xi":
            margin["override_xi"] = float(raw)
        elif key in ("horizon", "dt_max"):
            data[key] = float(raw)
        else:
            flags[key] = str(raw).lower() in ("1", "true", "yes", "on")
    return data


def scenario_from_dict(data: Dict, estimate_samples: Optional[int] = None) -> Scenario:
    try:
        agents = data["agents"]
    except KeyError as exc:
        raise ScenarioError("scenario has no agents") from exc
    flags = {k: bool(v) for k, v in data.get("flags", {}).items()}
    models = [build_model(i, entry) for i, entry in enumerate(agents)]
    formation = data.get("formation")
    synchronous = bool(data.get("sampling", {}).get("synchronous", False))
    controllers = []
    for model, entry in zip(models, agents):
        if model.role == Role.ADVERSARIAL:
            default = "adversarial_max"
        else:
            default = "normal_centralized" if synchronous else "normal_distributed"
        controllers.append(AgentController(
            agent=model.id, kind=ControllerKind(entry.get("controller", default)),
            nominal=build_nominal(entry, formation, model, flags.get("literal_paper_sign", False)),
            neighbor_radius=data.get("barrier", {}).get("neighbor_radius") if model.role == Role.NORMAL
            else entry.get("neighbor_radius"),
            self_filter=bool(entry.get("self_filter", False)),
        ))

    barrier_cfg = data.get("barrier", {})
    if "obstacles" in barrier_cfg:
        obstacles = [Obstacle(tuple(o["center"]), float(o["radius"])) for o in barrier_cfg["obstacles"]]
    elif "obstacle_generation" in barrier_cfg:
        gen = barrier_cfg["obstacle_generation"]
        obstacles = generate_obstacles(gen["count"], gen["radius"], gen["lo"], gen["hi"],
                                       gen.get("seed", 0), gen.get("clearance", 0.0))
    else:
        obstacles = []
    extra = [BarrierAtom.containment(c["agent"], c["center"], c["radius"])
             for c in barrier_cfg.get("containment", [])]
    extra += [BarrierAtom.halfspace(h["agent"], h["normal"], h["offset"])
              for h in barrier_cfg.get("halfspaces", [])]
    radii = [float(entry.get("radius", barrier_cfg.get("agent_radius", 0.5))) for entry in agents]

    sampling = data.get("sampling", {})
    n = len(models)
    periods = sampling.get("periods") or [float(sampling.get("period", 0.01))] * n
    jitters = sampling.get("jitters") or [0.0 if synchronous else float(sampling.get("jitter", 0.0))] * n
    schedule = SampleSchedule(list(periods), list(jitters), int(sampling.get("seed", 0)), synchronous)

    disturbance = data.get("disturbance", {})
    position_bounds = data.get("position_bounds")
    margin_cfg = dict(data.get("margin", {}))
    scenario = Scenario(
        name=data.get("name", "scenario"),
        models=models,
        initial_state=np.concatenate([np.asarray(e["initial_state"], dtype=float) for e in agents]),
        controllers=controllers,
        agent_radii=radii,
        obstacles=obstacles,
        rho=float(barrier_cfg.get("rho", 1.0)),
        alphas=[AlphaFunction.from_dict(a) for a in data.get("alphas", [{"kind": "linear", "gain": 1.0}])],
        margin=MarginConfig.from_dict(margin_cfg),
        schedule=schedule,
        horizon=float(data.get("horizon", 10.0)),
        dt_max=float(data.get("dt_max", 1e-3)),
        disturbance_kind=DisturbanceKind(disturbance.get("kind", "none")),
        resample_dt=float(disturbance.get("resample_dt", 0.05)),
        neighbor_radius=barrier_cfg.get("neighbor_radius"),
        extra_atoms=extra,
        include_pairs=bool(barrier_cfg.get("include_pairs", True)),
        agent_bounds=[_default_bounds(m, e, position_bounds) for m, e in zip(models, agents)],
        flags=flags,
        adversary_filter=data.get("adversary_filter"),
        description=data.get("description", ""),
        source=copy.deepcopy(data),
    )
    scenario.margin.phi_sum = sum(m.disturbance_bound for m in models)
    if margin_cfg.get("estimate"):
        samples = estimate_samples or int(margin_cfg.get("sample_count", 2000))
        scenario.margin = estimated_margin(scenario, scenario.margin, samples, int(margin_cfg.get("seed", 0)))
        scenario._cascade = None
    scenario.validate()
    logger.info(f"✅ loaded scenario {scenario.name}: {n} agents "
                f"({len(scenario.adversarial_ids)} adversarial), {len(scenario.barrier.atoms)} atoms")
    return scenario


def load_scenario(path, overrides: Optional[Dict[str, str]] = None) -> Scenario:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
    if overrides:
        data = apply_overrides(data, overrides)
    return scenario_from_dict(data)
