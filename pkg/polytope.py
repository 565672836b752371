#!/usr/bin/env python3
"""
Input-constraint polytopes U_i(x) = {u : A(x) u <= b(x)}.

Provides the halfspace encoding for constant boxes, constant halfspace sets and
state-dependent builders (unicycle IO bounds), plus a brute-force vertex
enumeration used both as an LP oracle and by the small-dimension solvers.
"""

import itertools
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Tuple

import numpy as np
from scipy.optimize import linprog

from cbf_errors import DegeneratePolytope, UnboundedPolytope

logger = logging.getLogger(__name__)

INTERIOR_TOL = 1e-9
VERTEX_TOL = 1e-8
# artificial box used to detect recession directions during enumeration
BOUNDING_SCALE = 1e6


class PolytopeKind(Enum):
    """How an input set is described"""
    CONSTANT_BOX = "box"
    CONSTANT_HALFSPACES = "halfspaces"
    STATE_DEPENDENT = "state_dependent"


@dataclass
class PolytopeSpec:
    """Input polytope description; use the classmethod constructors"""
    kind: PolytopeKind
    lo: Optional[np.ndarray] = None
    hi: Optional[np.ndarray] = None
    A: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    builder: Optional[Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]]] = None
    label: str = ""
    _checked: bool = field(default=False, repr=False, compare=False)

    @classmethod
    def box(cls, lo, hi, label: str = "box") -> "PolytopeSpec":
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        if lo.shape != hi.shape:
            raise ValueError(f"box bounds disagree in shape: {lo.shape} vs {hi.shape}")
        return cls(PolytopeKind.CONSTANT_BOX, lo=lo, hi=hi, label=label)

    @classmethod
    def symmetric_box(cls, half_widths, label: str = "box") -> "PolytopeSpec":
        hw = np.atleast_1d(np.asarray(half_widths, dtype=float))
        return cls.box(-hw, hw, label=label)

    @classmethod
    def halfspaces(cls, A, b, label: str = "halfspaces") -> "PolytopeSpec":
        A = np.atleast_2d(np.asarray(A, dtype=float))
        b = np.asarray(b, dtype=float).ravel()
        if A.shape[0] != b.shape[0]:
            raise ValueError(f"row count mismatch: A has {A.shape[0]}, b has {b.shape[0]}")
        return cls(PolytopeKind.CONSTANT_HALFSPACES, A=A, b=b, label=label)

    @classmethod
    def state_dependent(cls, builder, input_dim: int, label: str = "state_dependent") -> "PolytopeSpec":
        spec = cls(PolytopeKind.STATE_DEPENDENT, builder=builder, label=label)
        spec.lo = np.zeros(input_dim)  # only carries the dimension
        return spec

    @property
    def dim(self) -> int:
        if self.kind == PolytopeKind.CONSTANT_HALFSPACES:
            return self.A.shape[1]
        return self.lo.shape[0]

    @property
    def is_constant(self) -> bool:
        return self.kind != PolytopeKind.STATE_DEPENDENT

    def scaled(self, factor: float) -> "PolytopeSpec":
        """Scale the right-hand side (homogeneous shrink for origin-centred sets)"""
        if self.kind == PolytopeKind.CONSTANT_BOX:
            return PolytopeSpec.box(self.lo * factor, self.hi * factor, label=self.label)
        if self.kind == PolytopeKind.CONSTANT_HALFSPACES:
            return PolytopeSpec.halfspaces(self.A, self.b * factor, label=self.label)
        inner = self.builder
        return PolytopeSpec.state_dependent(
            lambda x: (inner(x)[0], inner(x)[1] * factor), self.dim, label=self.label)


def unicycle_io_matrix(theta: float, b_offset: float) -> np.ndarray:
    """T(theta) mapping output velocity to (nu, omega)"""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, s], [-s / b_offset, c / b_offset]])


def unicycle_io_bounds(b_offset: float, nu_max: float, omega_max: float) -> PolytopeSpec:
    """Output-velocity polytope equivalent to |nu| <= nu_max, |omega| <= omega_max"""
    if b_offset <= 0:
        raise ValueError("b_offset must be positive")
    b_vec = np.array([nu_max, nu_max, omega_max, omega_max], dtype=float)

    def build(x_i: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        T = unicycle_io_matrix(float(x_i[2]), b_offset)
        return np.vstack([T[0], -T[0], T[1], -T[1]]), b_vec.copy()

    return PolytopeSpec.state_dependent(build, 2, label=f"unicycle_io(b={b_offset})")


def box_rows(lo: np.ndarray, hi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    m = lo.shape[0]
    A = np.zeros((2 * m, m))
    b = np.zeros(2 * m)
    for j in range(m):
        A[2 * j, j] = 1.0
        A[2 * j + 1, j] = -1.0
        b[2 * j] = hi[j]
        b[2 * j + 1] = -lo[j]
    return A, b


def chebyshev_center(A: np.ndarray, b: np.ndarray, radius_cap: float = 1.0) -> Tuple[Optional[np.ndarray], float]:
    """
    Centre and radius of the largest inscribed ball (radius clipped at radius_cap).
    Returns (None, -inf) when the set is empty.
    """
    A = np.atleast_2d(A)
    q, m = A.shape
    norms = np.linalg.norm(A, axis=1)
    c = np.zeros(m + 1)
    c[-1] = -1.0
    A_ub = np.hstack([A, norms[:, None]])
    bounds = [(None, None)] * m + [(None, radius_cap)]
    res = linprog(c, A_ub=A_ub, b_ub=b, bounds=bounds, method="highs")
    if res.status != 0:
        return None, -np.inf
    return res.x[:m], float(res.x[-1])


def _check_interior(A: np.ndarray, b: np.ndarray, hint: Optional[np.ndarray] = None):
    """Raise DegeneratePolytope unless a ball of radius INTERIOR_TOL fits inside"""
    norms = np.linalg.norm(A, axis=1)
    if np.any(norms == 0.0):
        if np.any(b[norms == 0.0] < 0.0):
            raise DegeneratePolytope("polytope has a violated zero row")
        keep = norms > 0.0
        A, b, norms = A[keep], b[keep], norms[keep]
    centre = np.zeros(A.shape[1]) if hint is None else hint
    # cheap sufficient test around the hint before paying for an LP
    if np.min((b - A @ centre) / norms) > INTERIOR_TOL:
        return
    _, radius = chebyshev_center(A, b)
    if radius <= INTERIOR_TOL:
        raise DegeneratePolytope(f"Chebyshev radius {radius:.3e} <= {INTERIOR_TOL}")


def instantiate(spec: PolytopeSpec, x_i: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Halfspace data (A, b) of the input set at agent state x_i"""
    if spec.kind == PolytopeKind.CONSTANT_BOX:
        if np.min(spec.hi - spec.lo) / 2.0 <= INTERIOR_TOL:
            raise DegeneratePolytope(f"box {spec.label} has a zero-width side")
        return box_rows(spec.lo, spec.hi)
    if spec.kind == PolytopeKind.CONSTANT_HALFSPACES:
        if not spec._checked:
            _check_interior(spec.A, spec.b)
            spec._checked = True
        return spec.A.copy(), spec.b.copy()
    A, b = spec.builder(np.asarray(x_i, dtype=float))
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float).ravel()
    _check_interior(A, b)
    return A, b


def contains(A: np.ndarray, b: np.ndarray, u: np.ndarray, tol: float = 1e-9) -> bool:
    return bool(np.all(np.atleast_2d(A) @ np.atleast_1d(u) <= np.asarray(b) + tol))


@dataclass
class VertexSet:
    """Vertices of a bounded polytope, lexicographically sorted"""
    vertices: np.ndarray
    tolerance: float = VERTEX_TOL

    def __len__(self) -> int:
        return self.vertices.shape[0]

    def support(self, direction: np.ndarray) -> float:
        return float(np.max(self.vertices @ direction))


def _lex_sorted(points: np.ndarray) -> np.ndarray:
    if points.shape[0] == 0:
        return points
    order = np.lexsort(points.T[::-1])
    return points[order]


def enumerate_vertices(A: np.ndarray, b: np.ndarray, tol: float = VERTEX_TOL,
                       check_bounded: bool = True) -> VertexSet:
    """
    All vertices of {u : A u <= b} by solving every m-subset of rows.
    With check_bounded, an artificial box is appended and any vertex on it
    means the original set has a recession direction.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float).ravel()
    m = A.shape[1]
    norms = np.linalg.norm(A, axis=1)
    zero_rows = norms == 0.0
    if np.any(b[zero_rows] < 0.0):
        return VertexSet(np.zeros((0, m)), tol)
    A = A[~zero_rows] / norms[~zero_rows, None]
    b = b[~zero_rows] / norms[~zero_rows]

    if check_bounded:
        big = BOUNDING_SCALE * max(1.0, float(np.max(np.abs(b))) if b.size else 1.0)
        A_aug = np.vstack([A, np.eye(m), -np.eye(m)])
        b_aug = np.concatenate([b, np.full(2 * m, big)])
    else:
        big = None
        A_aug, b_aug = A, b

    if A_aug.shape[0] < m:
        return VertexSet(np.zeros((0, m)), tol)
    subsets = np.array(list(itertools.combinations(range(A_aug.shape[0]), m)), dtype=int)
    mats = A_aug[subsets]
    rhs = b_aug[subsets]
    regular = np.abs(np.linalg.det(mats)) > 1e-10
    if not np.any(regular):
        if check_bounded:
            raise UnboundedPolytope("no regular row subset; polytope contains a line")
        return VertexSet(np.zeros((0, m)), tol)
    points = np.linalg.solve(mats[regular], rhs[regular][..., None])[..., 0]
    feasible = np.all(points @ A_aug.T <= b_aug + tol, axis=1)
    points = points[feasible]
    if points.shape[0] == 0:
        return VertexSet(np.zeros((0, m)), tol)
    if check_bounded and np.any(np.abs(points) >= big * (1.0 - 1e-9)):
        raise UnboundedPolytope("support is unbounded in some direction")

    kept = []
    for p in _lex_sorted(points):
        if not any(np.max(np.abs(p - k)) <= tol for k in kept):
            kept.append(p)
    return VertexSet(_lex_sorted(np.array(kept)), tol)


def box_vertices(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    corners = np.array(list(itertools.product(*zip(lo, hi))), dtype=float)
    return _lex_sorted(corners)


def vertices(spec: PolytopeSpec, x_i: Optional[np.ndarray] = None) -> np.ndarray:
    """Vertex array of the input set at x_i (closed form for boxes)"""
    if spec.kind == PolytopeKind.CONSTANT_BOX:
        return box_vertices(spec.lo, spec.hi)
    A, b = instantiate(spec, x_i)
    return enumerate_vertices(A, b).vertices


def sample_interior(spec: PolytopeSpec, x_i: Optional[np.ndarray], rng: np.random.Generator) -> np.ndarray:
    """Random point of the input set as a Dirichlet mix of its vertices"""
    verts = vertices(spec, x_i)
    weights = rng.dirichlet(np.ones(verts.shape[0]))
    return weights @ verts
