import json
import math
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from refinement.critics import OracleCritic, SceneContext
from refinement.exceptions import (
    ConfigurationError, CriticProtocolError, DegeneratePoseError, InvalidArgumentError, RefinementAborted,
)
from refinement.geometry import Pose, PoseDelta, rotation_angle_between, so3_exp
from refinement.meshes import model_points
from refinement.objective import Objective
from refinement.optimizer import (
    AdamState, MomentumState, RefinementConfig, Schedule, adam_step, default_depth_schedule,
    default_lateral_schedule, default_rotation_schedule, load_refinement_config, momentum_step, refine,
    refine_with_symmetries,
)

from .helpers import FailingCritic, QuadraticCritic, desk_camera, rotated_about_camera_axis, shipped


def make_objective(critic, mesh_name='cube', context=None):
    intr = desk_camera()
    return Objective(np.zeros((intr.height, intr.width, 3)), shipped(mesh_name), intr, critic, context=context)


def oracle_factory(mesh_name, truth):
    mesh = shipped(mesh_name)
    context = SceneContext(truth, model_points(mesh))
    return lambda: make_objective(OracleCritic(), mesh_name, context)


class AdamTestCase(SimpleTestCase):
    """Unit tests for the bias-corrected Adam update"""

    def test_first_step_is_sign_times_step(self):
        state = AdamState(0.04, 0.6, 0.9)
        update = adam_step(state, [3.0, -0.001, 250.0])
        np.testing.assert_allclose(update, [-0.04, 0.04, -0.04], rtol=1e-4)

    def test_zero_gradient_gives_zero_update(self):
        state = AdamState(0.04, 0.6, 0.9)
        np.testing.assert_array_equal(adam_step(state, np.zeros(3)), np.zeros(3))

    def test_two_step_recurrence(self):
        state = AdamState(0.04, 0.6, 0.9, epsilon=1e-8)
        self.assertAlmostEqual(float(adam_step(state, [2.0])[0]), -0.04, places=9)
        second = float(adam_step(state, [-1.0])[0])
        # m = 0.6 * 0.8 - 0.4 = 0.08, v = 0.9 * 0.4 + 0.1 = 0.46
        expected = -0.04 * (0.08 / (1 - 0.6 ** 2)) / (math.sqrt(0.46 / (1 - 0.9 ** 2)) + 1e-8)
        self.assertAlmostEqual(second, expected, places=12)
        self.assertEqual(state.t, 2)

    def test_multiplier_scales_update(self):
        a = adam_step(AdamState(0.04, 0.6, 0.9), [1.0])
        b = adam_step(AdamState(0.04, 0.6, 0.9), [1.0], multiplier=0.05)
        np.testing.assert_allclose(b, 0.05 * a)

    def test_non_finite_gradient(self):
        with self.assertRaises(InvalidArgumentError):
            adam_step(AdamState(0.04, 0.6, 0.9), [float('nan')])


class MomentumTestCase(SimpleTestCase):
    def test_velocity_accumulates(self):
        state = MomentumState(1.0, 0.5)
        np.testing.assert_allclose(momentum_step(state, [1.0, 0.0]), [-1.0, 0.0])
        np.testing.assert_allclose(momentum_step(state, [1.0, 0.0]), [-1.5, 0.0])
        np.testing.assert_allclose(momentum_step(state, [0.0, 0.0]), [-0.75, 0.0])


class ScheduleTestCase(SimpleTestCase):
    """Unit tests for step-size schedules"""

    def test_rotation_schedule(self):
        schedule = default_rotation_schedule()
        self.assertEqual(schedule(0), 1.0)
        self.assertAlmostEqual(schedule(39), 1.0)
        self.assertAlmostEqual(schedule(99), 0.05)
        # geometric decay: halfway in iterations is halfway in log
        self.assertAlmostEqual(schedule(69), math.sqrt(0.05), places=9)
        values = [schedule(i) for i in range(100)]
        self.assertTrue(all(a >= b for a, b in zip(values, values[1:])), "Rotation steps never grow")

    def test_depth_schedule(self):
        schedule = default_depth_schedule()
        self.assertAlmostEqual(schedule(0), 0.05)
        self.assertAlmostEqual(schedule(34), 0.05)
        self.assertAlmostEqual(schedule(59), 1.0)
        self.assertAlmostEqual(schedule(84), 1.0)
        self.assertAlmostEqual(schedule(99), 0.3)
        values = [schedule(i) for i in range(35, 60)]
        self.assertTrue(all(a < b for a, b in zip(values, values[1:])), "Depth warms up monotonically")

    def test_lateral_schedule_is_flat(self):
        schedule = default_lateral_schedule()
        self.assertEqual({schedule(i) for i in range(100)}, {1.0})

    def test_held_beyond_breakpoints(self):
        schedule = default_depth_schedule()
        self.assertAlmostEqual(schedule(150), 0.3)

    def test_invalid(self):
        with self.assertRaises(InvalidArgumentError):
            Schedule(())
        with self.assertRaises(InvalidArgumentError):
            Schedule(((10, 1.0), (5, 0.5)))
        with self.assertRaises(InvalidArgumentError):
            Schedule(((0, 1.0), (10, 0.0)), interpolation='log')


class RefinementConfigTestCase(SimpleTestCase):
    """Unit tests for refinement configuration files"""

    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def test_shipped_config_equals_defaults(self):
        self.assertEqual(load_refinement_config().to_dict(), RefinementConfig().to_dict())

    def test_partial_file_keeps_defaults(self):
        path = self.dir / 'short.json'
        path.write_text(json.dumps({'iterations': 20, 'schedules': {'lateral': {'breakpoints': [[0, 0.5]]}}}))
        cfg = load_refinement_config(path)
        self.assertEqual(cfg.iterations, 20)
        self.assertEqual(cfg.lateral_schedule(10), 0.5)
        self.assertEqual(cfg.rotation_schedule.to_dict(), default_rotation_schedule().to_dict())

    def test_round_trip(self):
        cfg = replace(RefinementConfig(), iterations=7, branch_selection='best', evaluate_initial=True)
        self.assertEqual(RefinementConfig.from_dict(cfg.to_dict()).to_dict(), cfg.to_dict())

    def test_unknown_key(self):
        path = self.dir / 'typo.json'
        path.write_text(json.dumps({'iteratons': 20}))
        with self.assertRaises(ConfigurationError) as ctx:
            load_refinement_config(path)
        self.assertIn('iteratons', ctx.exception.details)

    def test_unreadable(self):
        with self.assertRaises(ConfigurationError):
            load_refinement_config(self.dir / 'missing.json')
        bad = self.dir / 'bad.json'
        bad.write_text('{')
        with self.assertRaises(ConfigurationError):
            load_refinement_config(bad)

    def test_invalid_values(self):
        with self.assertRaises(InvalidArgumentError):
            RefinementConfig(iterations=0)
        with self.assertRaises(InvalidArgumentError):
            RefinementConfig(rotation_betas=(0.6, 1.0))
        with self.assertRaises(InvalidArgumentError):
            RefinementConfig(branch_selection='median')


class RefineTestCase(SimpleTestCase):
    """Unit tests for a single refinement run"""

    def test_evaluation_budget_and_trace_length(self):
        critic = QuadraticCritic()
        objective = make_objective(critic)
        _, trace = refine(objective, Pose(np.eye(3), [0.0, 0.0, 0.7]))
        self.assertEqual(trace.eval_count, 1201)
        self.assertEqual(critic.calls, 1201)
        self.assertEqual(len(trace), 101)
        self.assertTrue(all(r.estimated for r in trace.records[:-1]))
        self.assertFalse(trace.records[-1].estimated, "The final record holds J itself")
        self.assertEqual([r.iteration for r in trace.records], list(range(101)))

    def test_evaluate_initial(self):
        objective = make_objective(QuadraticCritic(floor=1.0))
        _, trace = refine(objective, Pose(np.eye(3), [0.0, 0.0, 0.7]), RefinementConfig(evaluate_initial=True))
        self.assertEqual(trace.eval_count, 1202)
        self.assertFalse(trace.records[0].estimated)
        self.assertEqual(trace.records[0].objective, 1.0)

    def test_multipliers_recorded(self):
        objective = make_objective(QuadraticCritic())
        _, trace = refine(objective, Pose(np.eye(3), [0.0, 0.0, 0.7]), RefinementConfig(iterations=60))
        self.assertEqual(trace.records[0].multipliers, (1.0, 1.0, 0.05))
        self.assertAlmostEqual(trace.records[59].multipliers[2], 1.0)

    def test_quadratic_is_driven_down(self):
        critic = QuadraticCritic(center=[0.1, -0.05, 0.08, 5.0, -3.0, 0.02])
        objective = make_objective(critic)
        _, trace = refine(objective, Pose(np.eye(3), [0.0, 0.0, 0.7]))
        initial = objective.evaluate(PoseDelta.zeros())
        self.assertLess(trace.final_objective, 0.05 * initial)
        np.testing.assert_allclose(trace.records[-1].delta.as_vector(), critic.center, atol=0.02)

    def test_quadratic_decreases_monotonically(self):
        """Test that J falls at every iteration after the fifth in nearly every seeded run"""
        monotone = 0
        runs = 40
        for seed in range(runs):
            rng = np.random.default_rng(seed)
            signs = rng.choice([-1.0, 1.0], size=6)
            magnitudes = np.concatenate([
                rng.uniform(1.3, 1.6, 3), rng.uniform(2.0, 6.0, 2), rng.uniform(0.02, 0.04, 1),
            ])
            critic = QuadraticCritic(weights=(400.0, 400.0, 400.0, 0.01, 0.01, 4000.0), center=signs * magnitudes)
            _, trace = refine(make_objective(critic), Pose(np.eye(3), [0.0, 0.0, 0.7]),
                              RefinementConfig(iterations=30))
            values = [r.objective for r in trace.records[5:]]
            if all(b < a for a, b in zip(values, values[1:])):
                monotone += 1
        self.assertGreaterEqual(monotone, math.ceil(0.95 * runs))

    def test_stays_near_truth(self):
        truth = Pose(so3_exp([0.3, -0.5, 0.2]), [0.02, 0.01, 0.65])
        final, trace = refine(oracle_factory('wedge', truth)(), truth)
        self.assertLess(rotation_angle_between(final, truth), 0.5)
        last = trace.records[-1].delta
        self.assertLess(float(np.linalg.norm(last.theta_l)), 0.5)
        self.assertLess(abs(last.theta_d), 0.01)

    def test_converges_from_rotation_offset(self):
        truth = Pose(so3_exp([0.1, 0.6, -0.3]), [0.0, 0.0, 0.6])
        proposal = rotated_about_camera_axis(truth, [1.0, 1.0, 0.0], 10.0)
        self.assertAlmostEqual(rotation_angle_between(proposal, truth), 10.0, places=6)
        final, trace = refine(oracle_factory('cube', truth)(), proposal)
        self.assertLess(rotation_angle_between(final, truth), 1.0)
        self.assertLess(trace.final_objective, trace.records[0].objective)

    def test_negative_depth_rejected(self):
        with self.assertRaises(DegeneratePoseError):
            refine(make_objective(QuadraticCritic()), Pose(np.eye(3), [0.0, 0.0, -0.7]))

    def test_abort_keeps_partial_trace(self):
        objective = make_objective(FailingCritic(30, CriticProtocolError('critic went away')))
        with self.assertRaises(RefinementAborted) as ctx:
            refine(objective, Pose(np.eye(3), [0.0, 0.0, 0.7]))
        trace = ctx.exception.trace
        self.assertEqual(len(trace), 2, "Two full iterations completed before the failure")
        self.assertEqual(trace.eval_count, 31)
        self.assertIsNone(trace.final_pose)
        self.assertIsInstance(ctx.exception.__cause__, CriticProtocolError)

    def test_trace_serializes(self):
        _, trace = refine(make_objective(QuadraticCritic()), Pose(np.eye(3), [0.0, 0.0, 0.7]),
                          RefinementConfig(iterations=3))
        data = json.loads(json.dumps(trace.to_dict()))
        self.assertEqual(len(data['records']), 4)
        self.assertEqual(data['eval_count'], 37)


class SymmetricRefinementTestCase(SimpleTestCase):
    """Unit tests for refinement over symmetry branches"""

    def test_identity_only_matches_plain_refine(self):
        truth = Pose(so3_exp([0.3, -0.5, 0.2]), [0.02, 0.01, 0.65])
        proposal = rotated_about_camera_axis(truth, [0.0, 1.0, 0.0], 5.0)
        factory = oracle_factory('wedge', truth)
        cfg = RefinementConfig(iterations=10)
        result = refine_with_symmetries(factory, proposal, [np.eye(3)], cfg)
        final, _ = refine(factory(), proposal, cfg)
        self.assertEqual(result.branch, 0)
        self.assertEqual(result.pose, final)

    def test_flipped_proposal_recovered(self):
        box = shipped('box')
        truth = Pose(so3_exp([0.4, 0.2, -0.3]), [0.01, -0.01, 0.7])
        proposal = truth.compose_object_rotation(box.symmetry_set[1])
        result = refine_with_symmetries(oracle_factory('box', truth), proposal, box.symmetry_set,
                                        RefinementConfig(iterations=20, rotation_step=0.002, depth_step=0.001),
                                        workers=2)
        self.assertEqual(result.branch, 1)
        self.assertLess(rotation_angle_between(result.pose, truth), 1.0)
        self.assertLess(result.objectives[1], result.objectives[0])

    def test_flipped_proposal_recovered_with_default_schedule(self):
        box = shipped('box')
        truth = Pose(so3_exp([0.4, 0.2, -0.3]), [0.01, -0.01, 0.7])
        proposal = truth.compose_object_rotation(box.symmetry_set[1])
        result = refine_with_symmetries(oracle_factory('box', truth), proposal, box.symmetry_set, RefinementConfig(),
                                        workers=2)
        self.assertEqual(result.branch, 1)
        self.assertLess(result.objectives[result.branch], 2.0)
        self.assertEqual(result.traces[result.branch].eval_count, 1201)

    def test_ties_go_to_lower_index(self):
        factory = lambda: make_objective(QuadraticCritic(center=[0.05, 0.0, 0.0, 1.0, 0.0, 0.0]))  # noqa: E731
        flip = so3_exp([0.0, 0.0, math.pi])
        result = refine_with_symmetries(factory, Pose(np.eye(3), [0.0, 0.0, 0.7]), [np.eye(3), flip],
                                        RefinementConfig(iterations=5))
        self.assertEqual(result.objectives[0], result.objectives[1])
        self.assertEqual(result.branch, 0)

    def test_best_selection_uses_least_record(self):
        factory = lambda: make_objective(QuadraticCritic(center=[0.1, 0.0, 0.0, 4.0, 0.0, 0.0]))  # noqa: E731
        cfg = RefinementConfig(iterations=10, branch_selection='best')
        result = refine_with_symmetries(factory, Pose(np.eye(3), [0.0, 0.0, 0.7]), [np.eye(3)], cfg)
        trace = result.traces[0]
        self.assertEqual(result.objectives[0], min(r.objective for r in trace.records))

    def test_failed_branch_is_skipped(self):
        calls = []

        def factory():
            calls.append(1)
            if len(calls) == 1:
                return make_objective(FailingCritic(5, CriticProtocolError('lost')))
            return make_objective(QuadraticCritic())

        flip = so3_exp([0.0, 0.0, math.pi])
        result = refine_with_symmetries(factory, Pose(np.eye(3), [0.0, 0.0, 0.7]), [np.eye(3), flip],
                                        RefinementConfig(iterations=3))
        self.assertEqual(result.branch, 1)
        self.assertIsNone(result.objectives[0])
        self.assertIsInstance(result.errors[0], RefinementAborted)
        self.assertIsNotNone(result.traces[0], "The partial trace of the failed branch is kept")

    def test_all_branches_failing(self):
        factory = lambda: make_objective(FailingCritic(0, CriticProtocolError('down')))  # noqa: E731
        with self.assertRaises(RefinementAborted):
            refine_with_symmetries(factory, Pose(np.eye(3), [0.0, 0.0, 0.7]), [np.eye(3)],
                                   RefinementConfig(iterations=3))

    def test_identity_required(self):
        with self.assertRaises(InvalidArgumentError):
            refine_with_symmetries(lambda: make_objective(QuadraticCritic()), Pose(np.eye(3), [0.0, 0.0, 0.7]),
                                   [so3_exp([0.0, 0.0, math.pi])])
