import csv
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from refinement.camera import CameraIntrinsics
from refinement.exceptions import InvalidArgumentError
from refinement.geometry import Pose, so3_exp
from refinement.meshes import model_points
from refinement.metrics import (
    METRICS, MetricThresholds, MetricVerdict, SymmetrySet, add_metric, adds_metric, deg_cm_metric,
    evaluate_instance, format_table, mean_recall, recall, recall_table, reproj_metric, symmetric_metric,
    write_results_csv,
)

from .helpers import brute_force_add, brute_force_adds, desk_camera, random_pose, shipped

# per-object recall percentages of one refined-pose benchmark run
PUBLISHED_RECALLS = {
    'ape': 40.85, 'can': 82.44, 'cat': 35.64, 'driller': 71.33,
    'duck': 49.08, 'eggbox': 57.28, 'glue': 62.90, 'holepuncher': 43.14,
}


def verdict(object_id, accepted, frame_id=0, **values):
    flags = {m: accepted for m in METRICS}
    fields = dict(add_value=0.0, adds_value=0.0, reproj_value=0.0, reproj_s_value=0.0,
                  rot_err=0.0, trans_err=0.0, rot_err_s=0.0, trans_err_s=0.0)
    fields.update(values)
    return MetricVerdict(accepted=flags, frame_id=frame_id, object_id=object_id, **fields)


class ThresholdBoundaryTestCase(SimpleTestCase):
    """Test that thresholds are strict for distances and inclusive for 5cm/5deg"""

    def setUp(self):
        self.points = np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [-2.0, 1.0, 0.0]])
        self.gt = Pose(np.eye(3), [0.0, 0.0, 10.0])

    def test_add_at_threshold_rejected(self):
        est = Pose(np.eye(3), [1.0, 0.0, 10.0])
        value, accepted = add_metric(est, self.gt, self.points, diameter=10.0, fraction=0.1)
        self.assertEqual(value, 1.0)
        self.assertFalse(accepted)
        _, accepted = add_metric(Pose(np.eye(3), [0.999, 0.0, 10.0]), self.gt, self.points, 10.0, 0.1)
        self.assertTrue(accepted)

    def test_reproj_at_threshold_rejected(self):
        intr = CameraIntrinsics(fx=100.0, fy=100.0, cx=0.0, cy=0.0, width=64, height=64)
        gt = Pose(np.eye(3), [0.0, 0.0, 1.0])
        value, accepted = reproj_metric(Pose(np.eye(3), [0.05, 0.0, 1.0]), gt, [[0.0, 0.0, 0.0]], intr, 5.0)
        self.assertEqual(value, 5.0)
        self.assertFalse(accepted)

    def test_deg_cm_at_threshold_accepted(self):
        gt = Pose(np.eye(3), [0.0, 0.0, 1.0])
        rot, trans, accepted = deg_cm_metric(Pose(np.eye(3), [0.05, 0.0, 1.0]), gt, 5.0, 0.05)
        self.assertEqual(rot, 0.0)
        self.assertEqual(trans, 0.05)
        self.assertTrue(accepted)
        _, _, accepted = deg_cm_metric(Pose(so3_exp([0.0, 0.0, np.radians(5.1)]), [0.0, 0.0, 1.0]), gt)
        self.assertFalse(accepted)

    def test_invalid_thresholds(self):
        with self.assertRaises(InvalidArgumentError):
            MetricThresholds(reproj_px=0.0)

    def test_empty_points(self):
        with self.assertRaises(InvalidArgumentError):
            add_metric(self.gt, self.gt, np.zeros((0, 3)), 1.0)


class MetricOracleTestCase(SimpleTestCase):
    """Test the metrics against point-by-point computations and their ordering"""

    def setUp(self):
        self.rng = np.random.default_rng(8)
        self.mesh = shipped('wedge')
        self.points = model_points(self.mesh)
        self.intr = desk_camera()

    def perturbed(self, gt, scale=0.2):
        return Pose(so3_exp(self.rng.normal(scale=scale, size=3)) @ gt.rotation,
                    gt.translation + self.rng.normal(scale=0.01, size=3))

    def test_add_and_adds_match_brute_force(self):
        for _ in range(10):
            gt = random_pose(self.rng, depth=0.8)
            est = self.perturbed(gt)
            add, _ = add_metric(est, gt, self.points, self.mesh.diameter)
            adds, _ = adds_metric(est, gt, self.points, self.mesh.diameter)
            self.assertAlmostEqual(add, brute_force_add(est, gt, self.points), places=12)
            self.assertAlmostEqual(adds, brute_force_adds(est, gt, self.points), places=12)

    def test_add_and_adds_survive_camera_motion(self):
        motion_r, motion_t = so3_exp([0.7, -0.3, 1.9]), np.array([0.4, -1.2, 2.5])
        for _ in range(5):
            gt = random_pose(self.rng, depth=0.8)
            est = self.perturbed(gt)
            moved_gt = Pose(motion_r @ gt.rotation, motion_r @ gt.translation + motion_t)
            moved_est = Pose(motion_r @ est.rotation, motion_r @ est.translation + motion_t)
            for metric in (add_metric, adds_metric):
                before, _ = metric(est, gt, self.points, self.mesh.diameter)
                after, _ = metric(moved_est, moved_gt, self.points, self.mesh.diameter)
                self.assertAlmostEqual(after, before, places=12)

    def test_symmetric_variants_never_worse(self):
        box = shipped('box')
        points = model_points(box)
        symmetry = SymmetrySet.from_mesh(box)
        for _ in range(20):
            gt = random_pose(self.rng, depth=0.8)
            est = self.perturbed(gt, scale=1.0)
            v = evaluate_instance(est, gt, points, box.diameter, self.intr, symmetry)
            self.assertLessEqual(v.adds_value, v.add_value + 1e-12)
            self.assertLessEqual(v.reproj_s_value, v.reproj_value + 1e-12)
            self.assertLessEqual(v.rot_err_s, v.rot_err + 1e-9)
            for plain, sym in (('reproj', 'reproj-s'), ('5cm5deg', '5cm5deg-s'), ('add', 'adds')):
                self.assertTrue(v.accepted[sym] or not v.accepted[plain], f"{sym} rejected what {plain} accepted")

    def test_flipped_symmetric_estimate(self):
        box = shipped('box')
        points = model_points(box)
        gt = Pose(so3_exp([0.3, 0.1, -0.2]), [0.01, 0.02, 0.7])
        est = gt.compose_object_rotation(box.symmetry_set[1])
        v = evaluate_instance(est, gt, points, box.diameter, self.intr, SymmetrySet.from_mesh(box))
        self.assertFalse(v.accepted['add'])
        self.assertTrue(v.accepted['adds'])
        self.assertTrue(v.accepted['add(-s)'], "Symmetric objects are judged by ADD-S")
        self.assertFalse(v.accepted['reproj'])
        self.assertTrue(v.accepted['reproj-s'])
        self.assertFalse(v.accepted['5cm5deg'])
        self.assertTrue(v.accepted['5cm5deg-s'])
        self.assertAlmostEqual(v.rot_err, 180.0, places=6)
        self.assertAlmostEqual(v.rot_err_s, 0.0, places=6)
        self.assertEqual(v.value('5cm5deg'), v.rot_err)

    def test_asymmetric_object_uses_add(self):
        gt = random_pose(self.rng, depth=0.8)
        v = evaluate_instance(self.perturbed(gt), gt, self.points, self.mesh.diameter, self.intr)
        self.assertFalse(v.symmetric)
        self.assertEqual(v.accepted['add(-s)'], v.accepted['add'])
        self.assertEqual(v.value('add(-s)'), v.add_value)

    def test_symmetric_metric_picks_least(self):
        symmetry = SymmetrySet([so3_exp([0.0, 0.0, np.pi])])
        gt = Pose(np.eye(3), [0.0, 0.0, 1.0])
        est = Pose(so3_exp([0.0, 0.0, np.pi - 0.01]), [0.0, 0.0, 1.0])
        rot, _, accepted = symmetric_metric(deg_cm_metric, est, gt, symmetry)
        self.assertAlmostEqual(rot, np.degrees(0.01), places=6)
        self.assertTrue(accepted)


class SymmetrySetTestCase(SimpleTestCase):
    def test_identity_inserted(self):
        flip = so3_exp([0.0, 0.0, np.pi])
        symmetry = SymmetrySet([flip])
        self.assertEqual(len(symmetry), 2)
        np.testing.assert_array_equal(symmetry.rotations[0], np.eye(3))
        self.assertTrue(symmetry.is_symmetric)

    def test_identity_only(self):
        symmetry = SymmetrySet()
        self.assertEqual(len(symmetry), 1)
        self.assertFalse(symmetry.is_symmetric)
        self.assertEqual(len(SymmetrySet([np.eye(3)])), 1)


class RecallTestCase(SimpleTestCase):
    """Unit tests for recall aggregation and reporting"""

    def test_three_of_eight(self):
        verdicts = [verdict('ape', i < 3, frame_id=i) for i in range(8)]
        self.assertEqual(recall(verdicts, 'add'), 37.5)

    def test_published_mean(self):
        self.assertAlmostEqual(mean_recall(PUBLISHED_RECALLS), 55.3325, places=9)
        self.assertEqual(f"{mean_recall(PUBLISHED_RECALLS):.2f}", '55.33')

    def test_empty_and_unknown(self):
        with self.assertRaises(InvalidArgumentError):
            recall([], 'add')
        with self.assertRaises(InvalidArgumentError):
            recall([verdict('ape', True)], 'add-s')
        with self.assertRaises(InvalidArgumentError):
            mean_recall({})

    def test_table_mean_is_unweighted(self):
        verdicts = [verdict('ape', True, 0), verdict('cat', True, 1), verdict('cat', False, 2),
                    verdict('cat', False, 3), verdict('cat', False, 4)]
        table = recall_table(verdicts)
        self.assertEqual(list(table.rows), ['ape', 'cat'])
        self.assertEqual(table.rows['cat']['add'], 25.0)
        self.assertEqual(table.mean['add'], 62.5, "Objects weigh equally regardless of instance count")
        self.assertEqual(table.counts, {'ape': 1, 'cat': 4})

    def test_format_table(self):
        table = recall_table([verdict('ape', True, 0), verdict('duck', False, 1)])
        lines = format_table(table).splitlines()
        self.assertIn('add(-s)', lines[0])
        self.assertTrue(lines[-1].strip().startswith('Mean'))
        self.assertIn('50.00', lines[-1])
        self.assertTrue(any(line.strip().startswith('ape') and '100.00' in line for line in lines))

    def test_results_csv(self):
        verdicts = [verdict('ape', True, 0, rot_err=1.5), verdict('ape', False, 1)]
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'out' / 'metrics.csv'
            write_results_csv(path, verdicts)
            with path.open() as fh:
                rows = list(csv.reader(fh))
        self.assertEqual(rows[0], ['frame_id', 'object', 'metric', 'value', 'accepted'])
        self.assertEqual(len(rows), 1 + 2 * len(METRICS))
        deg_row = next(r for r in rows[1:] if r[0] == '0' and r[2] == '5cm5deg')
        self.assertEqual(float(deg_row[3]), 1.5)
        self.assertEqual(deg_row[4], '1')

    def test_results_csv_carries_run_hash(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'metrics.csv'
            write_results_csv(path, [verdict('cat', True)], run_hash='ab' * 32)
            with path.open() as fh:
                rows = list(csv.reader(fh))
        self.assertEqual(rows[0][-1], 'config_hash')
        self.assertTrue(all(r[-1] == 'ab' * 32 for r in rows[1:]))
