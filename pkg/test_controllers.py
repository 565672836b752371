"""Nominal policies, safety filters and the adversary model"""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from barrier import AlphaFunction, AlphaKind, BarrierAtom, ComposedBarrier, LieTerms, build_cascade
from cbf_errors import TimeOutOfRangeWarning
from controllers import (AgentController, BezierTrajectory, BroadcastTable, ControllerKind, FilterContext,
                         NominalKind, NominalPolicy, adversarial_input, centralized_filter, distributed_filter,
                         high_order_filter, nominal_input, unicycle_io, unicycle_io_inverse)
from dynamics import Role, double_integrator, single_integrator
from margins import MarginConfig
from polytope import PolytopeSpec
from solvers import SolveStatus

LINEAR = AlphaFunction(AlphaKind.LINEAR, 1.0)
NO_MARGIN = MarginConfig()
SIM2_POINTS = [[0, 0, 0], [-25, 25, 30], [125, 75, -30], [100, 100, 0]]


def _obstacle_setup():
    model = single_integrator(0, 2, PolytopeSpec.symmetric_box([1.0, 1.0]))
    barrier = ComposedBarrier([BarrierAtom.obstacle(0, (2.0, 0.0), 1.0)], 1.0, [model])
    return [model], barrier


class TestBezier:
    def test_endpoints(self):
        curve = BezierTrajectory(SIM2_POINTS, 0.0, 140.0)
        assert curve.s(0.0) == 1.0 and curve.s(140.0) == 0.0
        assert_allclose(curve.position(0.0), [0, 0, 0])
        assert_allclose(curve.position(140.0), [100, 100, 0])

    def test_derivatives_match_finite_differences(self):
        curve = BezierTrajectory(SIM2_POINTS, 0.0, 140.0)
        h = 1e-4
        for t in (1.0, 37.5, 90.0, 139.0):
            vel_fd = (curve.position(t + h) - curve.position(t - h)) / (2 * h)
            acc_fd = (curve.velocity(t + h) - curve.velocity(t - h)) / (2 * h)
            assert_allclose(curve.velocity(t), vel_fd, atol=1e-6)
            assert_allclose(curve.acceleration(t), acc_fd, atol=1e-6)

    def test_out_of_range_warns_and_clamps(self):
        curve = BezierTrajectory(SIM2_POINTS, 0.0, 140.0)
        with pytest.warns(TimeOutOfRangeWarning):
            position = curve.position(150.0)
        assert_allclose(position, [100, 100, 0])
        with pytest.warns(TimeOutOfRangeWarning):
            assert_allclose(curve.velocity(-1.0), np.zeros(3))

    def test_needs_four_points(self):
        with pytest.raises(ValueError):
            BezierTrajectory([[0, 0], [1, 1]], 0.0, 1.0)


class TestNominal:
    @staticmethod
    def _line():
        # constant velocity (1, 0), zero acceleration
        return BezierTrajectory([[0, 0], [1, 0], [2, 0], [3, 0]], 0.0, 3.0)

    def test_zero_error_gives_zero_input(self):
        model = double_integrator(0, 2, PolytopeSpec.symmetric_box([2.0, 2.0]))
        policy = NominalPolicy(NominalKind.FORMATION_BEZIER, self._line(), offset=np.array([0.0, 1.0]),
                               k1=2.0, order=2)
        x = np.array([1.5, 1.0, 1.0, 0.0])
        assert_allclose(nominal_input(policy, x, 1.5, model), np.zeros(2), atol=1e-12)

    def test_position_error_sign(self):
        model = double_integrator(0, 2, PolytopeSpec.symmetric_box([2.0, 2.0]))
        curve = BezierTrajectory([[0, 0], [-25, 25], [125, 75], [100, 100]], 0.0, 140.0)
        t = 40.0
        p_d, v_d, a_d = curve.position(t), curve.velocity(t), curve.acceleration(t)
        e = np.array([0.5, -0.25])
        x = np.concatenate([p_d - e, v_d])
        stabilizing = NominalPolicy(NominalKind.FORMATION_BEZIER, curve, k1=2.0, order=2)
        literal = NominalPolicy(NominalKind.FORMATION_BEZIER, curve, k1=2.0, order=2, literal_paper_sign=True)
        assert_allclose(nominal_input(stabilizing, x, t, model), 2.0 * e + a_d, atol=1e-12)
        assert_allclose(nominal_input(literal, x, t, model), -2.0 * e - a_d, atol=1e-12)

    def test_pursuit_picks_closest_normal(self):
        box = PolytopeSpec.symmetric_box([1.0, 1.0])
        models = [single_integrator(0, 2, box), single_integrator(1, 2, box),
                  single_integrator(2, 2, box, role=Role.ADVERSARIAL)]
        x_bar = np.array([0.0, 0.0, 10.0, 0.0, 8.0, 1.0])
        policy = NominalPolicy(NominalKind.PURSUIT_PD, k1=0.5)
        assert_allclose(nominal_input(policy, x_bar[4:], 0.0, models[2], x_bar, models), [1.0, -0.5])


class TestDistributedFilter:
    def test_inactive_row_keeps_nominal(self):
        models, barrier = _obstacle_setup()
        u_nom = np.array([-0.5, 0.3])
        decision = distributed_filter(0, np.array([-2.0, 0.0]), None, models, barrier, NO_MARGIN, u_nom,
                                      alpha=LINEAR, interval=0.1)
        assert decision.status == SolveStatus.OPTIMAL
        assert_allclose(decision.u, u_nom)
        assert decision.slack > 0

    def test_single_agent_matches_centralized(self):
        models, barrier = _obstacle_setup()
        x = np.array([0.2, 0.1])
        u_nom = np.array([1.0, 0.0])
        local = distributed_filter(0, x, None, models, barrier, NO_MARGIN, u_nom, alpha=LINEAR,
                                   interval=0.1, margin_value=0.3)
        joint = centralized_filter(x, models, barrier, NO_MARGIN, {0: u_nom}, alpha=LINEAR, interval=0.1,
                                   margin_value=0.3)
        assert local.status == joint.status == SolveStatus.OPTIMAL
        assert_allclose(local.u, joint.inputs[0], atol=1e-9)
        assert local.row.slack(local.u) == pytest.approx(0.0, abs=1e-9)

    def test_infeasible_row_falls_back_to_best_effort(self):
        model = single_integrator(0, 1, PolytopeSpec.symmetric_box([2.0]))
        barrier = ComposedBarrier([BarrierAtom.halfspace(0, [1.0], -3.0)], 1.0, [model])
        x = np.zeros(1)
        local = distributed_filter(0, x, None, [model], barrier, NO_MARGIN, np.zeros(1), alpha=LINEAR,
                                   interval=0.1, margin_value=0.0)
        assert local.status == SolveStatus.FALLBACK
        assert_allclose(local.u, [-2.0])
        joint = centralized_filter(x, [model], barrier, NO_MARGIN, {0: np.zeros(1)}, alpha=LINEAR, interval=0.1,
                                   margin_value=0.0)
        assert joint.status == SolveStatus.FALLBACK
        assert_allclose(joint.inputs[0], [-2.0])

    def test_stale_broadcast_shifts_row_linearly(self, two_single_integrators):
        barrier = ComposedBarrier([BarrierAtom.pair(0, 1, 1.0)], 1.0, two_single_integrators)
        x = np.array([0.0, 0.0, 1.5, 0.5])
        u_other = np.array([-0.7, 0.4])
        stale = BroadcastTable(two_single_integrators)
        fresh = BroadcastTable(two_single_integrators)
        fresh.publish(1, u_other, 0.0)
        u_nom = np.array([0.5, 0.0])
        row_stale = distributed_filter(0, x, stale, two_single_integrators, barrier, NO_MARGIN, u_nom,
                                       alpha=LINEAR, interval=0.1).row
        row_fresh = distributed_filter(0, x, fresh, two_single_integrators, barrier, NO_MARGIN, u_nom,
                                       alpha=LINEAR, interval=0.1).row
        lg_other = barrier.lie_terms(x).lg[1]
        assert row_stale.rhs - row_fresh.rhs == pytest.approx(float(lg_other @ u_other), abs=1e-12)

    def test_adversary_tightens_row(self, head_on_pair):
        barrier = ComposedBarrier([BarrierAtom.pair(0, 1, 1.0)], 1.0, head_on_pair)
        x = np.array([0.0, 2.0])
        decision = distributed_filter(0, x, None, head_on_pair, barrier, NO_MARGIN, np.zeros(1),
                                      alpha=LINEAR, interval=0.1, margin_value=0.0)
        # gamma_max of the adversary is 2|d| = 4, alpha(h) = -3
        assert decision.row.rhs == pytest.approx(-1.0)
        assert_allclose(decision.u, [-0.25])


class TestCentralizedFilter:
    def test_mirror_symmetric_head_on(self):
        box = PolytopeSpec.symmetric_box([1.0])
        models = [single_integrator(0, 1, box), single_integrator(1, 1, box)]
        barrier = ComposedBarrier([BarrierAtom.pair(0, 1, 1.0)], 1.0, models)
        decision = centralized_filter(np.array([-0.8, 0.8]), models, barrier, NO_MARGIN,
                                      {0: np.array([1.0]), 1: np.array([-1.0])}, alpha=LINEAR, interval=0.1)
        assert decision.status == SolveStatus.OPTIMAL
        assert abs(decision.inputs[0][0] + decision.inputs[1][0]) <= 1e-7
        assert decision.inputs[0][0] == pytest.approx(0.24375, abs=1e-9)


class TestHighOrderFilter:
    def test_toy_row_and_clamp(self, toy_double_integrator):
        model, barrier = toy_double_integrator
        cascade = build_cascade(barrier, [LINEAR, LINEAR], 0.0)
        x, v = 0.3, -0.2
        decision = high_order_filter(0, np.array([x, v]), None, cascade, NO_MARGIN, np.array([5.0]),
                                     interval=0.1, margin_value=0.5)
        assert_allclose(decision.row.coefficient, [1.0], atol=1e-12)
        assert decision.row.rhs == pytest.approx(-2 * v - x + 1 - 0.5, abs=1e-9)
        assert decision.u[0] == pytest.approx(-2 * v - x + 1 - 0.5, abs=1e-9)

    def test_order_one_delegates(self):
        models, barrier = _obstacle_setup()
        cascade = build_cascade(barrier, [LINEAR], 0.0)
        x, u_nom = np.array([0.2, 0.1]), np.array([1.0, 0.0])
        a = high_order_filter(0, x, None, cascade, NO_MARGIN, u_nom, interval=0.1, margin_value=0.2)
        b = distributed_filter(0, x, None, models, barrier, NO_MARGIN, u_nom, alpha=LINEAR, interval=0.1,
                               margin_value=0.2)
        assert np.array_equal(a.u, b.u)

    def test_larger_xi_never_loosens(self, toy_double_integrator):
        _, barrier = toy_double_integrator
        state = np.array([-0.5, 0.4])
        rows = [high_order_filter(0, state, None, build_cascade(barrier, [LINEAR, LINEAR], xi), NO_MARGIN,
                                  np.zeros(1), interval=0.1, margin_value=0.0).row.rhs
                for xi in (0.0, 0.25, 1.0)]
        assert rows[0] >= rows[1] >= rows[2]


class TestAdversary:
    def _setup(self, bound):
        box = PolytopeSpec.symmetric_box([bound, bound])
        model = single_integrator(0, 2, box, role=Role.ADVERSARIAL)
        barrier = ComposedBarrier([BarrierAtom.containment(0, (0.0, 0.0), 1.0)], 1.0, [model])
        terms = LieTerms(0.0, np.zeros(2), np.zeros(1), [np.array([2.0, -3.0])])
        return model, barrier, terms

    def test_maximizing_vertex(self):
        model, barrier, terms = self._setup(1.0)
        assert_allclose(adversarial_input(model, barrier, np.zeros(2), terms), [1, -1])

    def test_shrunken_box_halves_contribution(self):
        model, barrier, terms = self._setup(0.5)
        u = adversarial_input(model, barrier, np.zeros(2), terms)
        assert terms.lg[0] @ u == pytest.approx(2.5)

    def test_zero_gradient_tie_break(self):
        model, barrier, _ = self._setup(1.0)
        terms = LieTerms(0.0, np.zeros(2), np.zeros(1), [np.zeros(2)])
        assert_allclose(adversarial_input(model, barrier, np.zeros(2), terms), [-1, -1])

    def test_normal_agent_rejected(self, unit_box):
        model = single_integrator(0, 2, unit_box)
        barrier = ComposedBarrier([BarrierAtom.containment(0, (0.0, 0.0), 1.0)], 1.0, [model])
        with pytest.raises(ValueError):
            adversarial_input(model, barrier, np.zeros(2))


class TestUnicycleIo:
    def test_aligned_heading(self):
        assert unicycle_io(np.array([1.0, 0.0]), 0.0, 1.0) == pytest.approx((1.0, 0.0))

    def test_quarter_turn(self):
        nu, omega = unicycle_io(np.array([1.0, 0.0]), math.pi / 2, 1.0)
        assert nu == pytest.approx(0.0, abs=1e-12)
        assert omega == pytest.approx(-1.0)

    def test_round_trip(self, rng):
        for _ in range(100):
            theta, b = rng.uniform(-math.pi, math.pi), rng.uniform(0.2, 2.0)
            u = rng.uniform(-3, 3, 2)
            assert_allclose(unicycle_io_inverse(*unicycle_io(u, theta, b), theta, b), u, atol=1e-12)


class TestAgentController:
    def test_nominal_only_projects_into_input_set(self, two_single_integrators):
        barrier = ComposedBarrier([BarrierAtom.pair(0, 1, 1.0)], 1.0, two_single_integrators)
        ctx = FilterContext(two_single_integrators, barrier, None, [LINEAR], NO_MARGIN, [0.1, 0.1])
        target = NominalPolicy(NominalKind.FORMATION_BEZIER,
                               BezierTrajectory([[5, 5], [5, 5], [5, 5], [5, 5]], 0.0, 1.0), k1=10.0)
        controller = AgentController(0, ControllerKind.NOMINAL_ONLY, target)
        decision = controller.decide(ctx, np.array([0.0, 0.0, 3.0, 3.0]), 0.5, None)
        assert_allclose(decision.u, [1.0, 1.0], atol=1e-9)

    def test_broadcast_table_ages(self, two_single_integrators):
        table = BroadcastTable(two_single_integrators)
        assert_allclose(table.latest(0, 1)[0], np.zeros(2))
        table.publish(1, np.array([0.2, 0.1]), 0.4)
        assert table.max_age(0, 1.0) == pytest.approx(0.6)
        assert table.inputs_for(1)[0].shape == (2,)
