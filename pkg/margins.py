#!/usr/bin/env python3
"""
Sampled-data robustness margins.

epsilon(Gamma) bounds how far the stacked state drifts from its last sample,
eta(Gamma) tightens the sampled safety row so it holds between samples, and
xi absorbs the disturbance into the first level of a psi-cascade.
"""

import itertools
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from cbf_errors import DimensionTooLarge, EmptyBoundingBox
from dynamics import Role, StateLayout, max_flow_speed
from polytope import vertices
from solvers import GammaDirection, gamma_value

logger = logging.getLogger(__name__)

LIPSCHITZ_SAFETY_FACTOR = 1.2
THEOREM3_MAX_DIM = 6
CONDITION_TOL = 1e-9


@dataclass
class MarginConfig:
    """Flow bound, Lipschitz ledger and optional verbatim overrides"""
    mu: float = 0.0
    l_prime: float = 1.0
    c_f: float = 0.0
    c_g: float = 0.0
    c_alpha: float = 0.0
    c_gamma: float = 0.0
    c_h: float = 0.0
    u_max: float = 0.0
    phi_sum: float = 0.0
    override_eta: Optional[float] = None
    override_eta_prime: Optional[float] = None
    override_xi: Optional[float] = None
    provenance: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.l_prime <= 0:
            raise ValueError("l_prime must be positive")
        for name in ("mu", "c_f", "c_g", "c_alpha", "c_gamma", "c_h", "u_max", "phi_sum"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @classmethod
    def from_dict(cls, data: Dict) -> "MarginConfig":
        known = {f.name for f in fields(cls)}
        kwargs = {k: v for k, v in data.items() if k in known}
        config = cls(**kwargs)
        for key in ("mu", "c_f", "c_g", "c_alpha", "c_gamma", "c_h", "u_max"):
            if key in data:
                config.provenance.setdefault(key, "user-supplied")
        for key in ("override_eta", "override_eta_prime", "override_xi"):
            if data.get(key) is not None:
                config.provenance.setdefault(key, "user-supplied")
        return config

    def to_dict(self) -> Dict:
        return asdict(self)

    def with_overrides(self, **changes) -> "MarginConfig":
        updated = replace(self, provenance=dict(self.provenance), **changes)
        for key in changes:
            updated.provenance[key] = "override"
        return updated


@dataclass
class LipschitzConstants:
    c_f: float = 0.0
    c_g: float = 0.0
    c_alpha: float = 0.0
    c_gamma: float = 0.0
    c_h: float = 0.0
    u_max: float = 0.0

    def as_tuple(self) -> Tuple[float, ...]:
        return (self.c_f, self.c_g, self.c_alpha, self.c_gamma, self.c_h, self.u_max)


@dataclass
class MarginReport:
    epsilon: Dict[str, float]
    eta: List[float]
    eta_prime: Optional[List[float]]
    xi: float
    constants: Dict[str, float]
    provenance: Dict[str, str]

    def to_dict(self) -> Dict:
        return asdict(self)


def epsilon(gamma_interval: float, mu: float, l_prime: float = 1.0) -> float:
    """(mu / L') (exp(L' Gamma) - 1)"""
    if l_prime <= 0 or mu < 0 or gamma_interval < 0:
        raise ValueError("epsilon needs l_prime > 0, mu >= 0, interval >= 0")
    return mu / l_prime * math.expm1(l_prime * gamma_interval)


def eta(margin: MarginConfig, interval: float) -> float:
    if margin.override_eta is not None:
        return float(margin.override_eta)
    eps = epsilon(interval, margin.mu, margin.l_prime)
    slope = margin.c_f + margin.c_g * margin.u_max + margin.c_alpha + margin.c_gamma
    return slope * eps + margin.c_h * margin.phi_sum


def eta_prime(margin: MarginConfig, interval: float) -> float:
    """Margin for the top cascade level; the disturbance lives in xi instead"""
    if margin.override_eta_prime is not None:
        return float(margin.override_eta_prime)
    eps = epsilon(interval, margin.mu, margin.l_prime)
    return (margin.c_f + margin.c_g * margin.u_max + margin.c_alpha + margin.c_gamma) * eps


def xi(margin: MarginConfig) -> float:
    if margin.override_xi is not None:
        return float(margin.override_xi)
    return margin.c_h * margin.phi_sum


def _require_bounds(scenario) -> Tuple[np.ndarray, np.ndarray]:
    bounds = scenario.state_bounds()
    if bounds is None:
        raise EmptyBoundingBox(f"scenario {scenario.name} has no state bounds")
    return bounds


def _pair_partner(rng, x1, lo, hi):
    width = np.maximum(hi - lo, 1e-12)
    scale = 10.0 ** rng.uniform(-3.0, -0.5)
    return np.clip(x1 + scale * width * rng.standard_normal(x1.shape[0]), lo, hi)


def estimate_constants(scenario, sample_count: int = 10_000, rng_seed: int = 0) -> LipschitzConstants:
    """
    Sampled Lipschitz ledger: each constant is 1.2 x the largest difference
    quotient over random state pairs; u_max is the largest normal-agent vertex
    norm. Constants refer to psi_{q-1} and alpha_q when the scenario uses a cascade.
    """
    lo, hi = _require_bounds(scenario)
    models = scenario.models
    level, alpha = scenario.safety_level()
    barrier = scenario.barrier
    layout = StateLayout.from_models(models)
    normal = [m for m in models if m.role == Role.NORMAL]
    adversarial = [m for m in models if m.role == Role.ADVERSARIAL]
    rng = np.random.default_rng(rng_seed)

    def snapshot(x_bar):
        terms = level.lie_terms(x_bar)
        lg = np.concatenate([terms.lg[m.id] for m in normal]) if normal else np.zeros(0)
        gamma = sum(gamma_value(m, level, x_bar, GammaDirection.MAX, terms) for m in adversarial)
        return terms.drift_total(), lg, float(alpha(terms.value)), gamma

    best = dict(c_f=0.0, c_g=0.0, c_alpha=0.0, c_gamma=0.0, c_h=0.0, u_max=0.0)
    for _ in range(sample_count):
        x1 = rng.uniform(lo, hi)
        x2 = _pair_partner(rng, x1, lo, hi)
        gap = float(np.linalg.norm(x1 - x2))
        grad = barrier.gradient(x1)
        block_norm = max(float(np.linalg.norm(grad[layout.slice(i)])) for i in range(len(models)))
        best["c_h"] = max(best["c_h"], block_norm)
        for m in normal:
            verts = vertices(m.input_set, x1[layout.slice(m.id)])
            best["u_max"] = max(best["u_max"], float(np.max(np.linalg.norm(verts, axis=1))))
        if gap <= 1e-12:
            continue
        f1, g1, a1, c1 = snapshot(x1)
        f2, g2, a2, c2 = snapshot(x2)
        best["c_f"] = max(best["c_f"], abs(f1 - f2) / gap)
        best["c_alpha"] = max(best["c_alpha"], abs(a1 - a2) / gap)
        best["c_gamma"] = max(best["c_gamma"], abs(c1 - c2) / gap)
        per_agent = 0.0
        offset = 0
        for m in normal:
            d = g1[offset:offset + m.input_dim] - g2[offset:offset + m.input_dim]
            per_agent += float(np.linalg.norm(d))
            offset += m.input_dim
        best["c_g"] = max(best["c_g"], per_agent / gap)

    constants = LipschitzConstants(
        c_f=LIPSCHITZ_SAFETY_FACTOR * best["c_f"],
        c_g=LIPSCHITZ_SAFETY_FACTOR * best["c_g"],
        c_alpha=LIPSCHITZ_SAFETY_FACTOR * best["c_alpha"],
        c_gamma=LIPSCHITZ_SAFETY_FACTOR * best["c_gamma"],
        c_h=LIPSCHITZ_SAFETY_FACTOR * best["c_h"],
        u_max=best["u_max"],
    )
    logger.info(f"📊 Lipschitz estimates over {sample_count} pairs: {constants}")
    return constants


def estimated_margin(scenario, base: Optional[MarginConfig] = None, sample_count: int = 10_000,
                     rng_seed: int = 0) -> MarginConfig:
    """Fill every constant of the margin config that the user did not supply"""
    base = base or MarginConfig()
    constants = estimate_constants(scenario, sample_count, rng_seed)
    changes = {}
    provenance = dict(base.provenance)
    for key, value in asdict(constants).items():
        if provenance.get(key) != "user-supplied":
            changes[key] = value
            provenance[key] = "sampled-estimate"
    if provenance.get("mu") != "user-supplied":
        changes["mu"] = max_flow_speed(scenario, max(200, sample_count // 5), rng_seed)
        provenance["mu"] = "sampled-estimate"
    changes["phi_sum"] = sum(m.disturbance_bound for m in scenario.models)
    return replace(base, provenance=provenance, **changes)


def build_margin_report(scenario, margin: MarginConfig) -> MarginReport:
    schedule = scenario.schedule
    delta_max = schedule.max_jitter
    intervals = [p + delta_max for p in schedule.periods]
    normal = [m.id for m in scenario.models if m.role == Role.NORMAL]
    eps = {
        f"agent_{i}": epsilon(intervals[i], margin.mu, margin.l_prime) for i in normal
    }
    eps["star"] = epsilon(schedule.max_period + 2 * delta_max, margin.mu, margin.l_prime)
    etas = [eta(margin, intervals[i]) for i in normal]
    primes = [eta_prime(margin, intervals[i]) for i in normal] if scenario.cascade_order >= 2 else None
    constants = {k: getattr(margin, k) for k in ("mu", "l_prime", "c_f", "c_g", "c_alpha",
                                                  "c_gamma", "c_h", "u_max", "phi_sum")}
    return MarginReport(epsilon=eps, eta=etas, eta_prime=primes, xi=xi(margin),
                        constants=constants, provenance=dict(margin.provenance))


def _ball_points(rng, x_bar, radius, extra):
    n = x_bar.shape[0]
    points = [x_bar]
    if radius > 0:
        for k in range(n):
            e = np.zeros(n)
            e[k] = radius
            points.extend([x_bar + e, x_bar - e])
        for _ in range(extra):
            d = rng.standard_normal(n)
            points.append(x_bar + radius * rng.uniform() ** (1.0 / n) * d / np.linalg.norm(d))
    return points


def _in_band(barrier, x_bar, h, width):
    if h > CONDITION_TOL:
        return False
    if h >= -CONDITION_TOL:
        return True
    if width <= 0:
        return False
    grad = barrier.gradient(x_bar)
    norm = np.linalg.norm(grad)
    if norm > 0 and barrier.value(x_bar + width * grad / norm) > 0:
        return True
    n = x_bar.shape[0]
    for k in range(n):
        for sign in (1.0, -1.0):
            e = np.zeros(n)
            e[k] = sign * width
            if barrier.value(x_bar + e) > 0:
                return True
    return False


def check_theorem3_condition(scenario, margin: MarginConfig, grid_resolution: int = 21,
                             ball_samples: int = 8, rng_seed: int = 0):
    """
    Sampled sufficient-condition check over the inner boundary band of width
    2 eps*. Not a certificate: returns (holds, worst_margin, witness_state).
    """
    models = scenario.models
    layout = StateLayout.from_models(models)
    if layout.total > THEOREM3_MAX_DIM:
        raise DimensionTooLarge(f"stacked dimension {layout.total} > {THEOREM3_MAX_DIM}")
    lo, hi = _require_bounds(scenario)
    barrier = scenario.barrier
    alpha = scenario.alphas[0]
    schedule = scenario.schedule
    horizon_gap = schedule.max_period + 2 * schedule.max_jitter
    eps_star = epsilon(horizon_gap, margin.mu, margin.l_prime)
    eta_star = eta(margin, horizon_gap)
    normal = [m for m in models if m.role == Role.NORMAL]
    adversarial = [m for m in models if m.role == Role.ADVERSARIAL]
    rng = np.random.default_rng(rng_seed)

    axes = [np.linspace(lo[k], hi[k], grid_resolution) for k in range(layout.total)]
    worst, witness = -np.inf, None
    for point in itertools.product(*axes):
        x_bar = np.array(point)
        h = barrier.value(x_bar)
        if not _in_band(barrier, x_bar, h, 2 * eps_star):
            continue
        ball = _ball_points(rng, x_bar, eps_star, ball_samples)
        ball_terms = [barrier.lie_terms(y) for y in ball]
        total = 0.0
        for m in normal:
            total += max(gamma_value(m, barrier, y, GammaDirection.MIN, t) for y, t in zip(ball, ball_terms))
        terms = ball_terms[0]
        total += sum(gamma_value(m, barrier, x_bar, GammaDirection.MAX, terms) for m in adversarial)
        total += alpha(h) + eta_star
        if total > worst:
            worst, witness = total, x_bar
    holds = worst <= CONDITION_TOL
    if witness is None:
        logger.info("📊 band sampled empty; condition holds vacuously")
    else:
        logger.info(f"📊 sampled sufficient-condition check: worst={worst:.4g} holds={holds}")
    return holds, float(worst), witness
