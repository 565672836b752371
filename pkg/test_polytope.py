"""Input polytopes: encoding, membership and vertex enumeration"""

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.optimize import linprog

from cbf_errors import DegeneratePolytope, UnboundedPolytope
from polytope import (PolytopeSpec, contains, enumerate_vertices, instantiate, sample_interior,
                      unicycle_io_bounds, vertices)


class TestInstantiate:
    def test_box_encoding(self, unit_box):
        A, b = instantiate(unit_box)
        assert_allclose(A, [[1, 0], [-1, 0], [0, 1], [0, -1]])
        assert_allclose(b, [1, 1, 1, 1])

    def test_unicycle_rows_at_zero_heading(self):
        A, b = instantiate(unicycle_io_bounds(1.0, 4.0, 2.0), np.array([0.0, 0.0, 0.0]))
        assert_allclose(A, [[1, 0], [-1, 0], [0, 1], [0, -1]], atol=1e-12)
        assert_allclose(b, [4, 4, 2, 2])

    def test_unicycle_rows_at_quarter_turn(self):
        A, _ = instantiate(unicycle_io_bounds(1.0, 4.0, 2.0), np.array([0.0, 0.0, np.pi / 2]))
        assert_allclose(A[0], [0, 1], atol=1e-12)
        assert_allclose(A[2], [-1, 0], atol=1e-12)

    def test_zero_width_box_is_degenerate(self):
        with pytest.raises(DegeneratePolytope):
            instantiate(PolytopeSpec.box([0.0, -1.0], [0.0, 1.0]))

    def test_empty_halfspaces_are_degenerate(self):
        spec = PolytopeSpec.halfspaces([[1.0], [-1.0]], [-1.0, -1.0])
        with pytest.raises(DegeneratePolytope):
            instantiate(spec)

    def test_mismatched_rows_rejected(self):
        with pytest.raises(ValueError):
            PolytopeSpec.halfspaces([[1.0, 0.0]], [1.0, 2.0])


class TestContains:
    def test_interior_point(self, unit_box):
        A, b = instantiate(unit_box)
        assert contains(A, b, np.zeros(2))

    def test_violated_face(self, unit_box):
        A, b = instantiate(unit_box)
        assert not contains(A, b, np.array([1 + 1e-6, 0.0]), tol=1e-9)

    def test_vertex_with_zero_tolerance(self, unit_box):
        A, b = instantiate(unit_box)
        assert contains(A, b, np.array([1.0, 1.0]), tol=0.0)


class TestEnumerateVertices:
    def test_box(self, unit_box):
        verts = enumerate_vertices(*instantiate(unit_box)).vertices
        assert_allclose(verts, [[-1, -1], [-1, 1], [1, -1], [1, 1]])

    def test_simplex(self):
        A = np.array([[-1.0, 0.0], [0.0, -1.0], [1.0, 1.0]])
        verts = enumerate_vertices(A, np.array([0.0, 0.0, 1.0])).vertices
        assert_allclose(verts, [[0, 0], [0, 1], [1, 0]], atol=1e-12)

    def test_unicycle_strips_intersect_in_four_vertices(self):
        A, b = instantiate(unicycle_io_bounds(1.0, 4.0, 2.0), np.array([0.0, 0.0, 0.3]))
        verts = enumerate_vertices(A, b).vertices
        assert len(verts) == 4
        for v in verts:
            tight = set(np.flatnonzero(np.abs(A @ v - b) <= 1e-8))
            assert tight in ({0, 2}, {0, 3}, {1, 2}, {1, 3})

    def test_vertices_are_feasible(self, rng):
        for _ in range(20):
            A = rng.standard_normal((6, 3))
            b = rng.uniform(0.5, 2.0, 6)
            A = np.vstack([A, np.eye(3), -np.eye(3)])
            b = np.concatenate([b, np.full(6, 5.0)])
            verts = enumerate_vertices(A, b).vertices
            assert np.all(verts @ A.T <= b + 1e-8)

    def test_support_matches_lp(self, rng):
        A = np.vstack([rng.standard_normal((5, 2)), np.eye(2), -np.eye(2)])
        b = np.concatenate([rng.uniform(0.5, 1.5, 5), np.full(4, 3.0)])
        vset = enumerate_vertices(A, b)
        for _ in range(25):
            d = rng.standard_normal(2)
            res = linprog(-d, A_ub=A, b_ub=b, bounds=[(None, None)] * 2, method="highs")
            assert vset.support(d) == pytest.approx(-res.fun, abs=1e-7)

    def test_halfplane_is_unbounded(self):
        with pytest.raises(UnboundedPolytope):
            enumerate_vertices(np.array([[1.0, 0.0]]), np.array([1.0]))

    def test_infeasible_set_has_no_vertices(self):
        verts = enumerate_vertices(np.array([[1.0], [-1.0]]), np.array([-1.0, -1.0])).vertices
        assert verts.shape == (0, 1)


def test_sample_interior_stays_inside(unit_box, rng):
    A, b = instantiate(unit_box)
    for _ in range(50):
        assert contains(A, b, sample_interior(unit_box, None, rng))


def test_scaled_box_halves_vertices(unit_box):
    assert_allclose(vertices(unit_box.scaled(0.5)), 0.5 * vertices(unit_box))
