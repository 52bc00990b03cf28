import math

import numpy as np
from django.test import SimpleTestCase

from refinement.camera import make_zoom, project_to_patch
from refinement.exceptions import DegeneratePoseError, InvalidArgumentError
from refinement.geometry import (
    Pose, PoseDelta, ReferenceFrame, apply_delta, rotation_angle_between, so3_exp, so3_log,
)

from .helpers import desk_camera, random_pose, rodrigues_by_quaternion


class So3ExpTestCase(SimpleTestCase):
    """Unit tests for the rotation exponential"""

    def setUp(self):
        self.rng = np.random.default_rng(7)

    def test_zero_vector_gives_identity(self):
        np.testing.assert_array_equal(so3_exp([0.0, 0.0, 0.0]), np.eye(3))

    def test_half_turn_about_x(self):
        np.testing.assert_allclose(so3_exp([math.pi, 0.0, 0.0]), np.diag([1.0, -1.0, -1.0]), atol=1e-12)

    def test_quarter_turn_about_z_maps_x_to_y(self):
        R = so3_exp([0.0, 0.0, math.pi / 2])
        np.testing.assert_allclose(R @ [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(R @ [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], atol=1e-12)

    def test_random_vectors_are_rotations(self):
        """Test orthonormality, det +1, inverse and agreement with a quaternion oracle"""
        for v in self.rng.normal(scale=2.0, size=(2000, 3)):
            R = so3_exp(v)
            self.assertLess(np.abs(R.T @ R - np.eye(3)).max(), 1e-9)
            self.assertAlmostEqual(np.linalg.det(R), 1.0, delta=1e-9)
            self.assertLess(np.abs(R @ so3_exp(-v) - np.eye(3)).max(), 1e-9)
            self.assertLess(np.abs(R - rodrigues_by_quaternion(v)).max(), 1e-9)

    def test_tiny_vectors_use_taylor_branch(self):
        v = np.array([1e-10, -2e-10, 3e-11])
        np.testing.assert_allclose(so3_exp(v), rodrigues_by_quaternion(v), atol=1e-15)

    def test_non_finite_input_rejected(self):
        with self.assertRaises(InvalidArgumentError):
            so3_exp([float('nan'), 0.0, 0.0])
        with self.assertRaises(InvalidArgumentError):
            so3_exp([0.0, float('inf'), 0.0])

    def test_log_inverts_exp(self):
        for v in self.rng.normal(scale=0.8, size=(200, 3)):
            if np.linalg.norm(v) < math.pi - 1e-3:
                np.testing.assert_allclose(so3_log(so3_exp(v)), v, atol=1e-9)


class RotationAngleTestCase(SimpleTestCase):
    """Unit tests for the geodesic angle between poses"""

    def setUp(self):
        self.a = Pose(so3_exp([0.2, -0.4, 0.1]), [0.0, 0.0, 1.0])

    def test_same_pose_is_zero(self):
        self.assertEqual(rotation_angle_between(self.a, self.a), 0.0)

    def test_small_rotation_matches_norm(self):
        b = Pose(so3_exp([0.1, 0.0, 0.0]) @ self.a.rotation, self.a.translation)
        self.assertAlmostEqual(rotation_angle_between(self.a, b), 5.729577951308232, places=9)

    def test_half_turn_is_180(self):
        b = Pose(so3_exp([0.0, math.pi, 0.0]) @ self.a.rotation, self.a.translation)
        self.assertAlmostEqual(rotation_angle_between(self.a, b), 180.0, places=6)

    def test_angle_equals_axis_angle_norm(self):
        rng = np.random.default_rng(3)
        identity = Pose.identity()
        for v in rng.normal(size=(500, 3)):
            norm = np.linalg.norm(v)
            if norm > math.pi or norm < 1e-6:
                continue
            angle = rotation_angle_between(identity, Pose(so3_exp(v), [0.0, 0.0, 1.0]))
            self.assertAlmostEqual(angle, math.degrees(norm), delta=1e-6 * math.degrees(norm))


class PoseTestCase(SimpleTestCase):
    """Unit tests for the Pose value type"""

    def test_reflection_rejected(self):
        with self.assertRaises(InvalidArgumentError):
            Pose(np.diag([1.0, 1.0, -1.0]), [0.0, 0.0, 1.0])

    def test_non_orthonormal_rejected(self):
        with self.assertRaises(InvalidArgumentError):
            Pose(np.eye(3) * 1.01, [0.0, 0.0, 1.0])

    def test_dict_round_trip(self):
        pose = random_pose(np.random.default_rng(0))
        self.assertEqual(Pose.from_dict(pose.to_dict()), pose)

    def test_missing_field_reported(self):
        with self.assertRaises(InvalidArgumentError):
            Pose.from_dict({'R': np.eye(3).tolist()})

    def test_arrays_are_read_only_copies(self):
        R = np.eye(3)
        pose = Pose(R, [0.0, 0.0, 1.0])
        R[0, 0] = 5.0
        self.assertEqual(pose.rotation[0, 0], 1.0, "Pose must not alias the caller's array")
        with self.assertRaises(ValueError):
            pose.translation[0] = 1.0

    def test_compose_object_rotation(self):
        pose = random_pose(np.random.default_rng(1))
        flip = so3_exp([0.0, 0.0, math.pi])
        composed = pose.compose_object_rotation(flip)
        np.testing.assert_allclose(composed.rotation, pose.rotation @ flip)
        np.testing.assert_array_equal(composed.translation, pose.translation)


class ApplyDeltaTestCase(SimpleTestCase):
    """Unit tests for the local pose parameterization"""

    def setUp(self):
        self.intr = desk_camera()
        self.pose0 = Pose(so3_exp([0.3, 0.2, -0.1]), [0.04, -0.03, 0.9])
        self.frame = ReferenceFrame.at(self.pose0, self.intr, 0.15, 512)

    def test_zero_delta_returns_reference_pose(self):
        self.assertIs(apply_delta(self.frame, PoseDelta.zeros()), self.pose0)

    def test_log_two_doubles_depth_along_same_ray(self):
        pose = apply_delta(self.frame, PoseDelta(theta_d=math.log(2.0)))
        self.assertAlmostEqual(pose.depth, 2.0 * self.pose0.depth, delta=1e-12)
        direction0 = self.pose0.translation / np.linalg.norm(self.pose0.translation)
        direction = pose.translation / np.linalg.norm(pose.translation)
        np.testing.assert_allclose(direction, direction0, atol=1e-12)

    def test_lateral_offset_round_trip(self):
        pose = apply_delta(self.frame, PoseDelta(theta_l=[10.0, 0.0]))
        center = project_to_patch(self.frame.zoom, pose, np.zeros(3))
        np.testing.assert_allclose(center, self.frame.projected_center0 + [10.0, 0.0], atol=1e-6)

    def test_random_deltas_round_trip(self):
        """Test that center projection and depth follow theta_l and theta_d"""
        rng = np.random.default_rng(11)
        for _ in range(200):
            axis = rng.normal(size=3)
            theta_r = axis / np.linalg.norm(axis) * rng.uniform(0.0, 1.0)
            delta = PoseDelta(theta_r, rng.normal(scale=20.0, size=2), rng.normal(scale=0.2))
            pose = apply_delta(self.frame, delta)
            center = project_to_patch(self.frame.zoom, pose, np.zeros(3))
            np.testing.assert_allclose(center, self.frame.projected_center0 + delta.theta_l, atol=1e-6)
            expected_depth = math.exp(delta.theta_d) * self.frame.depth0
            self.assertAlmostEqual(pose.depth, expected_depth, delta=1e-12 * expected_depth)
            np.testing.assert_allclose(pose.rotation, so3_exp(delta.theta_r) @ self.pose0.rotation, atol=1e-12)

    def test_reference_frame_center_is_patch_center(self):
        np.testing.assert_allclose(self.frame.projected_center0, [256.0, 256.0], atol=1e-9)

    def test_nonpositive_reference_depth_rejected(self):
        zoom = make_zoom(self.intr, self.pose0, 0.15)
        with self.assertRaises(DegeneratePoseError):
            ReferenceFrame(self.pose0, [256.0, 256.0], 0.0, zoom)

    def test_delta_vector_order(self):
        delta = PoseDelta.from_vector([1, 2, 3, 4, 5, 6])
        np.testing.assert_array_equal(delta.theta_r, [1, 2, 3])
        np.testing.assert_array_equal(delta.theta_l, [4, 5])
        self.assertEqual(delta.theta_d, 6.0)
        np.testing.assert_array_equal(delta.as_vector(), [1, 2, 3, 4, 5, 6])

    def test_non_finite_delta_rejected(self):
        with self.assertRaises(InvalidArgumentError):
            PoseDelta(theta_d=float('nan'))
