#!/usr/bin/env python3
"""
Safe-set functions for the multi-agent safety filters.

Atoms (pairwise collision, obstacle, containment, halfspace) are evaluated on
agent output positions and composed with a log-sum-exp smooth maximum. The
composed value h is safe when h <= 0. PsiCascade builds the high relative
degree functions psi_0..psi_{q-1} on top of a composed barrier.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from cbf_errors import GradientSingularity, RelativeDegreeMismatch
from dynamics import AgentModel, Role, StateLayout

logger = logging.getLogger(__name__)

SINGULARITY_TOL = 1e-9
FD_STEP = 1e-6
RELATIVE_DEGREE_TOL = 1e-7


class AtomKind(Enum):
    PAIR_COLLISION = "pair"
    AGENT_OBSTACLE = "obstacle"
    AGENT_CONTAINMENT = "containment"
    HALFSPACE = "halfspace"


@dataclass(frozen=True)
class Obstacle:
    center: Tuple[float, ...]
    radius: float

    def to_dict(self) -> Dict:
        return {"center": list(self.center), "radius": self.radius}


@dataclass(frozen=True)
class BarrierAtom:
    """One scalar constraint on output positions; h <= 0 is safe"""
    kind: AtomKind
    agents: Tuple[int, ...]
    radius: float = 0.0
    center: Optional[Tuple[float, ...]] = None
    offset: float = 0.0

    @classmethod
    def pair(cls, i: int, j: int, radius: float) -> "BarrierAtom":
        return cls(AtomKind.PAIR_COLLISION, (i, j), radius=radius)

    @classmethod
    def obstacle(cls, i: int, center, radius: float) -> "BarrierAtom":
        return cls(AtomKind.AGENT_OBSTACLE, (i,), radius=radius, center=tuple(float(c) for c in center))

    @classmethod
    def containment(cls, i: int, center, radius: float) -> "BarrierAtom":
        return cls(AtomKind.AGENT_CONTAINMENT, (i,), radius=radius, center=tuple(float(c) for c in center))

    @classmethod
    def halfspace(cls, i: int, normal, offset: float) -> "BarrierAtom":
        return cls(AtomKind.HALFSPACE, (i,), center=tuple(float(c) for c in normal), offset=offset)

    @property
    def label(self) -> str:
        return f"{self.kind.value}{self.agents}"

    def value(self, positions: Sequence[np.ndarray]) -> float:
        p = positions[self.agents[0]]
        if self.kind == AtomKind.PAIR_COLLISION:
            d = p - positions[self.agents[1]]
            return self.radius ** 2 - float(d @ d)
        if self.kind == AtomKind.HALFSPACE:
            return float(np.asarray(self.center) @ p) - self.offset
        d = p - np.asarray(self.center)
        if self.kind == AtomKind.AGENT_OBSTACLE:
            return self.radius ** 2 - float(d @ d)
        return float(d @ d) - self.radius ** 2

    def position_gradient(self, positions: Sequence[np.ndarray]) -> np.ndarray:
        """dh/dp of the first agent (the second agent of a pair gets the negative)"""
        p = positions[self.agents[0]]
        if self.kind == AtomKind.PAIR_COLLISION:
            d = p - positions[self.agents[1]]
            if np.linalg.norm(d) <= SINGULARITY_TOL:
                raise GradientSingularity(f"agents {self.agents} coincide")
            return -2.0 * d
        if self.kind == AtomKind.HALFSPACE:
            return np.asarray(self.center, dtype=float)
        d = p - np.asarray(self.center)
        return -2.0 * d if self.kind == AtomKind.AGENT_OBSTACLE else 2.0 * d

    def curvature(self) -> float:
        """Scalar c with d2h/dp2 = c * I (pair blocks carry +/- signs)"""
        if self.kind in (AtomKind.PAIR_COLLISION, AtomKind.AGENT_OBSTACLE):
            return -2.0
        if self.kind == AtomKind.AGENT_CONTAINMENT:
            return 2.0
        return 0.0


@dataclass
class LieTerms:
    """Value, stacked gradient and per-agent Lie derivatives of one barrier level"""
    value: float
    grad: np.ndarray
    lf: np.ndarray
    lg: List[np.ndarray]

    def drift_total(self) -> float:
        return float(np.sum(self.lf))


@dataclass
class HdotTerm:
    agent: int
    lf: float
    lg_u: float
    lphi_bound: float


def log_sum_exp(values: np.ndarray, rho: float, sigma: Optional[float] = None) -> float:
    shift = float(np.max(values)) if sigma is None else sigma
    return shift + float(np.log(np.sum(np.exp(rho * (values - shift))))) / rho


@dataclass
class ComposedBarrier:
    """Log-sum-exp composition h = sigma + (1/rho) ln sum exp(rho (h_k - sigma))"""
    atoms: List[BarrierAtom]
    rho: float
    models: Sequence[AgentModel]
    sigma: Optional[float] = None
    layout: StateLayout = field(init=False, repr=False)

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        self.layout = StateLayout.from_models(self.models)

    def positions(self, x_bar: np.ndarray) -> List[np.ndarray]:
        return [m.position(x_bar[self.layout.slice(i)]) for i, m in enumerate(self.models)]

    def atom_values(self, x_bar: np.ndarray) -> np.ndarray:
        pos = self.positions(x_bar)
        return np.array([atom.value(pos) for atom in self.atoms])

    def weights(self, values: np.ndarray) -> np.ndarray:
        z = np.exp(self.rho * (values - np.max(values)))
        return z / np.sum(z)

    def value(self, x_bar: np.ndarray) -> float:
        if not self.atoms:
            raise ValueError("barrier has no atoms")
        return log_sum_exp(self.atom_values(x_bar), self.rho, self.sigma)

    def _atom_gradients(self, x_bar: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        pos = self.positions(x_bar)
        jac = [m.position_jacobian(x_bar[self.layout.slice(i)]) for i, m in enumerate(self.models)]
        values = np.empty(len(self.atoms))
        grads = np.zeros((len(self.atoms), self.layout.total))
        for k, atom in enumerate(self.atoms):
            values[k] = atom.value(pos)
            gp = atom.position_gradient(pos)
            i = atom.agents[0]
            grads[k, self.layout.slice(i)] += gp @ jac[i]
            if atom.kind == AtomKind.PAIR_COLLISION:
                j = atom.agents[1]
                grads[k, self.layout.slice(j)] -= gp @ jac[j]
        return values, grads

    def gradient(self, x_bar: np.ndarray) -> np.ndarray:
        values, grads = self._atom_gradients(x_bar)
        return self.weights(values) @ grads

    def value_and_gradient(self, x_bar: np.ndarray) -> Tuple[float, np.ndarray]:
        values, grads = self._atom_gradients(x_bar)
        return log_sum_exp(values, self.rho, self.sigma), self.weights(values) @ grads

    def hessian(self, x_bar: np.ndarray) -> np.ndarray:
        """Analytic for linear output maps, central differences of the gradient otherwise"""
        n = self.layout.total
        if not all(m.linear_output for m in self.models):
            H = np.zeros((n, n))
            for c in range(n):
                step = np.zeros(n)
                step[c] = FD_STEP
                H[:, c] = (self.gradient(x_bar + step) - self.gradient(x_bar - step)) / (2 * FD_STEP)
            return 0.5 * (H + H.T)
        values, grads = self._atom_gradients(x_bar)
        w = self.weights(values)
        g = w @ grads
        H = self.rho * ((grads.T * w) @ grads - np.outer(g, g))
        for k, atom in enumerate(self.atoms):
            curv = atom.curvature()
            if curv == 0.0 or w[k] == 0.0:
                continue
            i = atom.agents[0]
            Ci = self.models[i].output_matrix
            si = self.layout.slice(i)
            H[si, si] += w[k] * curv * (Ci.T @ Ci)
            if atom.kind == AtomKind.PAIR_COLLISION:
                j = atom.agents[1]
                Cj = self.models[j].output_matrix
                sj = self.layout.slice(j)
                H[sj, sj] += w[k] * curv * (Cj.T @ Cj)
                H[si, sj] -= w[k] * curv * (Ci.T @ Cj)
                H[sj, si] -= w[k] * curv * (Cj.T @ Ci)
        return H

    def lie_terms(self, x_bar: np.ndarray) -> LieTerms:
        value, grad = self.value_and_gradient(x_bar)
        return lie_terms_from_gradient(value, grad, self.models, self.layout, x_bar)

    def restricted_to(self, agent: int, x_bar: np.ndarray, radius: float) -> "ComposedBarrier":
        """Atoms whose agents and obstacles all lie within radius of the agent's position"""
        pos = self.positions(x_bar)
        centre = pos[agent]
        kept = []
        for atom in self.atoms:
            if any(np.linalg.norm(pos[a] - centre) > radius for a in atom.agents):
                continue
            if atom.kind == AtomKind.AGENT_OBSTACLE and \
                    np.linalg.norm(np.asarray(atom.center) - centre) > radius + atom.radius:
                continue
            kept.append(atom)
        return ComposedBarrier(kept, self.rho, self.models, self.sigma)

    def involves(self, agent: int) -> bool:
        return any(agent in atom.agents for atom in self.atoms)


def lie_terms_from_gradient(value: float, grad: np.ndarray, models: Sequence[AgentModel],
                            layout: StateLayout, x_bar: np.ndarray) -> LieTerms:
    lf = np.empty(len(models))
    lg = []
    for i, model in enumerate(models):
        sl = layout.slice(i)
        block = grad[sl]
        x_i = x_bar[sl]
        lf[i] = float(block @ model.drift(x_i))
        lg.append(block @ model.actuation(x_i))
    return LieTerms(value=value, grad=grad, lf=lf, lg=lg)


def eval_h(barrier: ComposedBarrier, x_bar: np.ndarray) -> float:
    return barrier.value(x_bar)


def grad_h(barrier: ComposedBarrier, x_bar: np.ndarray) -> np.ndarray:
    return barrier.gradient(x_bar)


def hess_h(barrier: ComposedBarrier, x_bar: np.ndarray) -> np.ndarray:
    return barrier.hessian(x_bar)


def decompose_hdot(barrier: ComposedBarrier, models: Sequence[AgentModel],
                   x_bar: np.ndarray, inputs: Sequence[np.ndarray]) -> List[HdotTerm]:
    """Per-agent contributions to h' under the given inputs"""
    grad = barrier.gradient(x_bar)
    layout = StateLayout.from_models(models)
    terms = []
    for i, model in enumerate(models):
        sl = layout.slice(i)
        block = grad[sl]
        x_i = x_bar[sl]
        terms.append(HdotTerm(
            agent=i,
            lf=float(block @ model.drift(x_i)),
            lg_u=float(block @ model.actuation(x_i) @ inputs[i]),
            lphi_bound=float(np.linalg.norm(block) * model.disturbance_bound),
        ))
    return terms


class AlphaKind(Enum):
    LINEAR = "linear"
    CUBIC = "cubic"


@dataclass(frozen=True)
class AlphaFunction:
    """Extended class-K-infinity function c*s or c*s^3"""
    kind: AlphaKind = AlphaKind.LINEAR
    gain: float = 1.0

    def __post_init__(self):
        if self.gain <= 0:
            raise ValueError("alpha gain must be positive")

    @classmethod
    def from_dict(cls, data: Dict) -> "AlphaFunction":
        return cls(AlphaKind(data.get("kind", "linear")), float(data.get("gain", 1.0)))

    def __call__(self, s: float) -> float:
        if self.kind == AlphaKind.LINEAR:
            return self.gain * s
        return self.gain * s ** 3

    def derivative(self, s: float) -> float:
        if self.kind == AlphaKind.LINEAR:
            return self.gain
        return 3.0 * self.gain * s ** 2


def stacked_drift(models: Sequence[AgentModel], layout: StateLayout, x_bar: np.ndarray) -> np.ndarray:
    return np.concatenate([m.drift(x_bar[layout.slice(i)]) for i, m in enumerate(models)])


@dataclass
class PsiCascade:
    """
    psi_0 = h, psi_1 = sum_i L_fi h + xi + alpha_1(h),
    psi_j = d/dt psi_{j-1} + alpha_j(psi_{j-1}) along the drift.
    """
    barrier: ComposedBarrier
    alphas: Tuple[AlphaFunction, ...]
    xi: float = 0.0

    @property
    def order(self) -> int:
        return len(self.alphas)

    @property
    def models(self) -> Sequence[AgentModel]:
        return self.barrier.models

    @property
    def layout(self) -> StateLayout:
        return self.barrier.layout

    @property
    def _analytic(self) -> bool:
        return all(m.linear_output and m.drift_jacobian is not None for m in self.models)

    def with_barrier(self, barrier: ComposedBarrier) -> "PsiCascade":
        return PsiCascade(barrier, self.alphas, self.xi)

    def value(self, j: int, x_bar: np.ndarray) -> float:
        if j == 0:
            return self.barrier.value(x_bar)
        prev = self.value(j - 1, x_bar)
        grad = self.gradient(j - 1, x_bar)
        drift = stacked_drift(self.models, self.barrier.layout, x_bar)
        extra = self.xi if j == 1 else 0.0
        return float(grad @ drift) + extra + self.alphas[j - 1](prev)

    def values(self, x_bar: np.ndarray) -> List[float]:
        """psi_0 .. psi_{q-1}"""
        out = [self.barrier.value(x_bar)]
        if self.order < 2:
            return out
        grad = self.barrier.gradient(x_bar)
        drift = stacked_drift(self.models, self.barrier.layout, x_bar)
        out.append(float(grad @ drift) + self.xi + self.alphas[0](out[0]))
        for j in range(2, self.order):
            out.append(self.value(j, x_bar))
        return out

    def gradient(self, j: int, x_bar: np.ndarray) -> np.ndarray:
        if j == 0:
            return self.barrier.gradient(x_bar)
        if j == 1 and self._analytic:
            layout = self.barrier.layout
            h, grad = self.barrier.value_and_gradient(x_bar)
            H = self.barrier.hessian(x_bar)
            drift = stacked_drift(self.models, layout, x_bar)
            out = H @ drift + self.alphas[0].derivative(h) * grad
            for i, model in enumerate(self.models):
                sl = layout.slice(i)
                out[sl] += model.drift_jacobian(x_bar[sl]).T @ grad[sl]
            return out
        n = x_bar.shape[0]
        out = np.empty(n)
        for c in range(n):
            step = np.zeros(n)
            step[c] = FD_STEP
            out[c] = (self.value(j, x_bar + step) - self.value(j, x_bar - step)) / (2 * FD_STEP)
        return out

    def lie_terms(self, x_bar: np.ndarray, level: Optional[int] = None) -> LieTerms:
        """Lie derivatives of psi at the given level (default q-1)"""
        j = self.order - 1 if level is None else level
        if j == 0:
            return self.barrier.lie_terms(x_bar)
        return lie_terms_from_gradient(self.value(j, x_bar), self.gradient(j, x_bar),
                                       self.models, self.barrier.layout, x_bar)

    def psi_q(self, x_bar: np.ndarray, inputs: Sequence[np.ndarray]) -> float:
        """Top level with the inputs applied and no disturbance"""
        terms = self.lie_terms(x_bar)
        total = terms.drift_total() + sum(float(lg @ u) for lg, u in zip(terms.lg, inputs))
        return total + self.alphas[-1](terms.value)


def build_cascade(barrier: ComposedBarrier, alphas: Sequence[AlphaFunction], xi: float,
                  models: Optional[Sequence[AgentModel]] = None,
                  state_bounds: Optional[Tuple[np.ndarray, np.ndarray]] = None,
                  samples: int = 50, rng_seed: int = 0) -> PsiCascade:
    """Cascade over the barrier; inputs must not enter psi_j for j < q-1"""
    if models is not None and any(a is not b for a, b in zip(models, barrier.models)):
        barrier = ComposedBarrier(barrier.atoms, barrier.rho, models, barrier.sigma)
    if xi < 0:
        raise ValueError("xi must be nonnegative")
    cascade = PsiCascade(barrier, tuple(alphas), float(xi))
    if cascade.order < 2:
        return cascade
    if state_bounds is None:
        logger.warning("⚠️ no state bounds given, relative degree check skipped")
        return cascade
    lo, hi = state_bounds
    rng = np.random.default_rng(rng_seed)
    layout = barrier.layout
    for _ in range(samples):
        x_bar = rng.uniform(lo, hi)
        for j in range(cascade.order - 1):
            grad = cascade.gradient(j, x_bar)
            tol = RELATIVE_DEGREE_TOL * max(1.0, float(np.linalg.norm(grad)))
            for k, model in enumerate(barrier.models):
                sl = layout.slice(k)
                lg = grad[sl] @ model.actuation(x_bar[sl])
                if np.max(np.abs(lg)) > tol:
                    raise RelativeDegreeMismatch(
                        f"input of agent {k} appears in psi_{j} (|dpsi/du| = {np.max(np.abs(lg)):.3e})")
    logger.info(f"✅ cascade of order {cascade.order} passed the relative degree check")
    return cascade


def pairwise_atoms(models: Sequence[AgentModel], agent_radii: Sequence[float],
                   obstacles: Sequence[Obstacle] = (), include_adversarial: bool = False) -> List[BarrierAtom]:
    """
    Pair and obstacle atoms protecting the normal agents. Adversary-adversary
    and adversary-obstacle atoms are left out unless include_adversarial.
    """
    atoms = []
    n = len(models)
    for i in range(n):
        for j in range(i + 1, n):
            if not include_adversarial and models[i].is_adversarial and models[j].is_adversarial:
                continue
            atoms.append(BarrierAtom.pair(i, j, agent_radii[i] + agent_radii[j]))
    for i in range(n):
        if models[i].is_adversarial and not include_adversarial:
            continue
        for obs in obstacles:
            atoms.append(BarrierAtom.obstacle(i, obs.center, obs.radius + agent_radii[i]))
    return atoms


def adversary_atoms(models: Sequence[AgentModel], agent_radii: Sequence[float],
                    obstacles: Sequence[Obstacle] = ()) -> List[BarrierAtom]:
    """Atoms adversaries use for their own collision avoidance"""
    adv = [i for i, m in enumerate(models) if m.role == Role.ADVERSARIAL]
    atoms = [BarrierAtom.pair(i, j, agent_radii[i] + agent_radii[j])
             for a, i in enumerate(adv) for j in adv[a + 1:]]
    for i in adv:
        for obs in obstacles:
            atoms.append(BarrierAtom.obstacle(i, obs.center, obs.radius + agent_radii[i]))
    return atoms
