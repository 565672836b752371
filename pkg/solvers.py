#!/usr/bin/env python3
"""
Small dense LP and QP solvers with checkable contracts.

LPs with at most four variables are solved by vertex enumeration with a
lexicographic tie-break so repeated runs pick the same arg-min; larger ones go
to HiGHS. The QP is a primal active-set method for the identity-Hessian
projection min ||u - u_nom||^2 s.t. A u <= b, returning KKT residuals.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional

import numpy as np
from scipy.optimize import linprog

from cbf_errors import SolverFailure, UnboundedPolytope
from polytope import PolytopeKind, PolytopeSpec, chebyshev_center, enumerate_vertices, instantiate

logger = logging.getLogger(__name__)

FEASIBILITY_TOL = 1e-8
STATIONARITY_TOL = 1e-7
TIE_TOL = 1e-9
MAX_QP_ITERATIONS = 500
VERTEX_LP_MAX_DIM = 4


class SolveStatus(Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    NUMERICAL_FAILURE = "NumericalFailure"
    FALLBACK = "Fallback"


class GammaDirection(Enum):
    MIN = "min"
    MAX = "max"


@dataclass
class LpProblem:
    """minimize c^T u subject to A u <= b"""
    c: np.ndarray
    A: np.ndarray
    b: np.ndarray


@dataclass
class QpProblem:
    """minimize ||u - target||^2 subject to A_ineq u <= b_ineq"""
    target: np.ndarray
    A_ineq: np.ndarray
    b_ineq: np.ndarray
    start: Optional[np.ndarray] = None


@dataclass
class SolveResult:
    x: Optional[np.ndarray]
    value: float
    status: SolveStatus
    iterations: int = 0
    kkt_residual: float = 0.0
    primal_residual: float = 0.0
    complementarity: float = 0.0
    multipliers: Optional[np.ndarray] = None

    @property
    def ok(self) -> bool:
        return self.status == SolveStatus.OPTIMAL


def solve_lp(problem: LpProblem) -> SolveResult:
    c = np.asarray(problem.c, dtype=float).ravel()
    A = np.atleast_2d(np.asarray(problem.A, dtype=float))
    b = np.asarray(problem.b, dtype=float).ravel()
    m = c.shape[0]
    if m <= VERTEX_LP_MAX_DIM:
        try:
            verts = enumerate_vertices(A, b).vertices
        except UnboundedPolytope:
            return SolveResult(None, -np.inf, SolveStatus.UNBOUNDED)
        if verts.shape[0] == 0:
            return SolveResult(None, np.inf, SolveStatus.INFEASIBLE)
        values = verts @ c
        best = float(np.min(values))
        # vertices are sorted, so the first near-optimal one is lexicographically smallest
        idx = int(np.argmax(values <= best + TIE_TOL * max(1.0, abs(best))))
        return SolveResult(verts[idx].copy(), float(values[idx]), SolveStatus.OPTIMAL)

    res = linprog(c, A_ub=A, b_ub=b, bounds=[(None, None)] * m, method="highs")
    if res.status == 0:
        return SolveResult(res.x, float(res.fun), SolveStatus.OPTIMAL, iterations=int(res.nit))
    if res.status == 2:
        return SolveResult(None, np.inf, SolveStatus.INFEASIBLE)
    if res.status == 3:
        return SolveResult(None, -np.inf, SolveStatus.UNBOUNDED)
    logger.debug(f"HiGHS returned status {res.status}: {res.message}")
    return SolveResult(None, np.nan, SolveStatus.NUMERICAL_FAILURE)


def box_lp(c: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> SolveResult:
    """Closed-form LP over a box with the same tie-break as vertex enumeration"""
    c = np.asarray(c, dtype=float).ravel()
    x = lo.copy()
    flat = np.abs(c) * (hi - lo) <= 1e-12
    x[(c < 0) & ~flat] = hi[(c < 0) & ~flat]
    return SolveResult(x, float(c @ x), SolveStatus.OPTIMAL)


def polytope_lp(spec: PolytopeSpec, x_i: Optional[np.ndarray], c: np.ndarray) -> SolveResult:
    """minimize c^T u over the input set at x_i"""
    if spec.kind == PolytopeKind.CONSTANT_BOX:
        return box_lp(c, spec.lo, spec.hi)
    A, b = instantiate(spec, x_i)
    return solve_lp(LpProblem(c, A, b))


def _independent_subset(rows: np.ndarray, candidates: List[int], limit: int) -> List[int]:
    chosen: List[int] = []
    for i in candidates:
        trial = chosen + [i]
        if np.linalg.matrix_rank(rows[trial], tol=1e-10) == len(trial):
            chosen = trial
        if len(chosen) == limit:
            break
    return chosen


def _phase_one(A: np.ndarray, b: np.ndarray) -> Optional[np.ndarray]:
    centre, radius = chebyshev_center(A, b)
    if centre is None or radius < 0.0:
        return None
    if np.max(A @ centre - b) > FEASIBILITY_TOL:
        return None
    return centre


def solve_qp(problem: QpProblem, max_iterations: int = MAX_QP_ITERATIONS) -> SolveResult:
    """Euclidean projection of target onto {u : A u <= b} by primal active set"""
    t = np.asarray(problem.target, dtype=float).ravel()
    A = np.atleast_2d(np.asarray(problem.A_ineq, dtype=float))
    b = np.asarray(problem.b_ineq, dtype=float).ravel()
    m = t.shape[0]
    q = b.shape[0]
    if q == 0 or np.max(A @ t - b) <= 0.0:
        return SolveResult(t.copy(), 0.0, SolveStatus.OPTIMAL, multipliers=np.zeros(q))

    x = None
    if problem.start is not None:
        start = np.asarray(problem.start, dtype=float).ravel()
        if np.max(A @ start - b) <= FEASIBILITY_TOL:
            x = start.copy()
    if x is None:
        x = _phase_one(A, b)
    if x is None:
        return SolveResult(None, np.inf, SolveStatus.INFEASIBLE)

    scale = 1.0 + np.abs(b)
    active = [i for i in range(q) if b[i] - A[i] @ x <= 1e-9 * scale[i]]
    W = _independent_subset(A, active, m)
    lam_W = np.zeros(0)
    converged = False
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        g = x - t
        if W:
            AW = A[W]
            lam_W = np.linalg.solve(AW @ AW.T, -AW @ g)
            p = -g - AW.T @ lam_W
        else:
            lam_W = np.zeros(0)
            p = -g
        if np.linalg.norm(p) <= 1e-12 * (1.0 + np.linalg.norm(x)):
            if not W or np.min(lam_W) >= -1e-12:
                converged = True
                break
            W.pop(int(np.argmin(lam_W)))
            continue
        step, blocking = 1.0, None
        for i in range(q):
            if i in W:
                continue
            ap = A[i] @ p
            if ap > 1e-14:
                ratio = max((b[i] - A[i] @ x) / ap, 0.0)
                if ratio < step:
                    step, blocking = ratio, i
        x = x + step * p
        if blocking is not None:
            W.append(blocking)

    lam = np.zeros(q)
    if W:
        lam[W] = np.maximum(lam_W, 0.0) if converged else lam_W
    stationarity = float(np.max(np.abs(x - t + A.T @ lam)))
    primal = float(max(0.0, np.max(A @ x - b)))
    complementarity = float(np.max(np.abs(lam * (A @ x - b))))
    ok = converged and primal <= FEASIBILITY_TOL and stationarity <= STATIONARITY_TOL
    status = SolveStatus.OPTIMAL if ok else SolveStatus.NUMERICAL_FAILURE
    if not ok:
        logger.debug(f"QP stopped after {iterations} iterations: stat={stationarity:.2e}, primal={primal:.2e}")
    return SolveResult(x, float(0.5 * (x - t) @ (x - t)), status, iterations=iterations,
                       kkt_residual=stationarity, primal_residual=primal,
                       complementarity=complementarity, multipliers=lam)


def _agent_terms(model, barrier, x_bar, terms):
    if terms is None:
        terms = barrier.lie_terms(x_bar)
    x_i = x_bar[barrier.layout.slice(model.id)]
    return terms, x_i


def gamma_value(model, barrier, x_bar: np.ndarray, direction: GammaDirection, terms=None) -> float:
    """Min or max achievable L_f h + L_g h u over the agent's input set"""
    terms, x_i = _agent_terms(model, barrier, x_bar, terms)
    lg = terms.lg[model.id]
    sign = 1.0 if direction == GammaDirection.MIN else -1.0
    res = polytope_lp(model.input_set, x_i, sign * lg)
    if not res.ok:
        raise SolverFailure(f"agent {model.id}: gamma LP {res.status.value}", res.status)
    return float(terms.lf[model.id] + sign * res.value)


def umin_point(model, barrier, x_bar: np.ndarray, terms=None) -> np.ndarray:
    """Strongest safety effort: arg-min of L_g h u over the input set"""
    terms, x_i = _agent_terms(model, barrier, x_bar, terms)
    res = polytope_lp(model.input_set, x_i, terms.lg[model.id])
    if not res.ok:
        raise SolverFailure(f"agent {model.id}: best-effort LP {res.status.value}", res.status)
    return res.x


def umax_point(model, barrier, x_bar: np.ndarray, terms=None) -> np.ndarray:
    """Worst-case input: arg-max of L_g h u over the input set"""
    terms, x_i = _agent_terms(model, barrier, x_bar, terms)
    res = polytope_lp(model.input_set, x_i, -terms.lg[model.id])
    if not res.ok:
        raise SolverFailure(f"agent {model.id}: adversary LP {res.status.value}", res.status)
    return res.x
