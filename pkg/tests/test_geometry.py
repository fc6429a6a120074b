import os
import sys

import numpy as np
import pytest
import torch

# Add the repository root to the path for package imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from src.errors import DegenerateInput, EmptySet, InvalidInput
from src.geometry import (RigidPose, TriMesh, apply_similarity, axis_angle_to_matrix, chamfer_distance,
                          geodesic_angle, is_rotation, make_box, make_uv_sphere, matrix_to_rot6d,
                          matrix_to_rot6d_torch, procrustes_align, random_rotation, rot6d_to_matrix,
                          rot6d_to_matrix_torch, sample_surface, sample_surface_barycentric)


class TestRot6D:
    """6D rotation representation"""

    def setup_method(self):
        self.rng = np.random.default_rng(0)

    def test_identity_columns(self):
        assert np.allclose(rot6d_to_matrix([1, 0, 0, 0, 1, 0]), np.eye(3))

    def test_unnormalized_columns_are_orthonormalized(self):
        m = rot6d_to_matrix([2, 0, 0, 1, 1, 0])
        assert np.allclose(m, np.eye(3))

    def test_round_trip_on_random_rotations(self):
        for _ in range(20):
            r = random_rotation(self.rng)
            assert np.allclose(rot6d_to_matrix(matrix_to_rot6d(r)), r, atol=1e-12)

    def test_output_is_rotation_for_random_input(self):
        for _ in range(20):
            m = rot6d_to_matrix(self.rng.normal(size=6))
            assert is_rotation(m)

    def test_parallel_columns_raise(self):
        with pytest.raises(DegenerateInput):
            rot6d_to_matrix([1, 0, 0, 2, 0, 0])

    def test_zero_column_raises(self):
        with pytest.raises(DegenerateInput):
            rot6d_to_matrix([0, 0, 0, 0, 1, 0])

    def test_wrong_length_raises(self):
        with pytest.raises(InvalidInput):
            rot6d_to_matrix([1, 0, 0, 0, 1])

    def test_batched_torch_matches_numpy(self):
        r6 = self.rng.normal(size=(5, 6))
        expected = rot6d_to_matrix(r6)
        got = rot6d_to_matrix_torch(torch.as_tensor(r6)).numpy()
        assert np.allclose(got, expected, atol=1e-12)
        assert np.allclose(matrix_to_rot6d_torch(torch.as_tensor(expected)).numpy(), matrix_to_rot6d(expected))


class TestRigidPose:
    """Pose helpers"""

    def test_compose_with_inverse_is_identity(self):
        pose = RigidPose(axis_angle_to_matrix([0.3, -0.2, 0.5]), np.array([0.1, 0.2, 0.3]))
        composed = pose.compose(pose.inverse())
        assert np.allclose(composed.rotation, np.eye(3))
        assert np.allclose(composed.translation, 0.0)

    def test_rejects_non_rotation(self):
        with pytest.raises(InvalidInput):
            RigidPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_geodesic_angle(self):
        a = np.eye(3)
        b = axis_angle_to_matrix([0.0, 0.0, 0.4])
        assert geodesic_angle(a, b) == pytest.approx(0.4)


class TestProcrustes:
    """Similarity alignment"""

    def setup_method(self):
        rng = np.random.default_rng(3)
        self.points = rng.normal(size=(50, 3))
        self.rotation = random_rotation(rng)
        self.translation = np.array([0.3, -1.0, 2.0])

    def test_recovers_similarity(self):
        target = apply_similarity(self.points, self.rotation, self.translation, 1.7)
        r, t, s = procrustes_align(self.points, target)
        assert np.allclose(r, self.rotation, atol=1e-10)
        assert np.allclose(t, self.translation, atol=1e-10)
        assert s == pytest.approx(1.7)

    def test_rigid_mode_fixes_scale(self):
        target = apply_similarity(self.points, self.rotation, self.translation, 1.0)
        _, _, s = procrustes_align(self.points, target, with_scale=False)
        assert s == 1.0

    def test_reflection_is_not_returned(self):
        target = self.points * np.array([1.0, 1.0, -1.0])
        r, _, _ = procrustes_align(self.points, target)
        assert np.linalg.det(r) == pytest.approx(1.0)

    def test_too_few_points(self):
        with pytest.raises(DegenerateInput):
            procrustes_align(self.points[:2], self.points[:2])

    def test_collinear_points(self):
        line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
        with pytest.raises(DegenerateInput):
            procrustes_align(line, line)


class TestChamfer:
    """Chamfer distance in centimeters"""

    def test_identical_sets(self):
        pts = np.random.default_rng(1).normal(size=(30, 3))
        assert chamfer_distance(pts, pts) == 0.0

    def test_translated_single_points(self):
        assert chamfer_distance(np.zeros((1, 3)), np.array([[0.01, 0.0, 0.0]])) == pytest.approx(1.0)

    def test_symmetric(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(20, 3)), rng.normal(size=(35, 3))
        assert chamfer_distance(a, b) == pytest.approx(chamfer_distance(b, a))

    def test_matches_brute_force(self):
        rng = np.random.default_rng(5)
        a, b = rng.normal(size=(40, 3)), rng.normal(size=(25, 3))
        pairwise = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
        expected = 0.5 * (pairwise.min(axis=1).mean() + pairwise.min(axis=0).mean()) * 100.0
        assert chamfer_distance(a, b) == pytest.approx(expected, rel=1e-12)

    def test_invariant_under_shared_rigid_motion(self):
        rng = np.random.default_rng(6)
        a, b = rng.normal(size=(30, 3)), rng.normal(size=(30, 3))
        rotation, translation = random_rotation(rng), np.array([1.0, -2.0, 0.5])
        moved = chamfer_distance(apply_similarity(a, rotation, translation, 1.0),
                                 apply_similarity(b, rotation, translation, 1.0))
        assert moved == pytest.approx(chamfer_distance(a, b), rel=1e-9)

    def test_empty_set(self):
        with pytest.raises(EmptySet):
            chamfer_distance(np.zeros((0, 3)), np.zeros((4, 3)))


class TestMeshes:
    """Mesh factories and sampling"""

    def test_box_surface_area(self):
        box = make_box(0.2)
        assert box.face_areas().sum() == pytest.approx(6 * 0.04)

    def test_sphere_face_count(self):
        sphere = make_uv_sphere(0.1, 32, 32)
        assert 1900 <= len(sphere.faces) <= 2100

    def test_from_spec(self):
        assert len(TriMesh.from_spec('builtin:box:0.1').faces) == 12
        with pytest.raises(InvalidInput):
            TriMesh.from_spec('builtin:torus')

    def test_obj_round_trip(self, tmp_path):
        box = make_box(0.3)
        box.save_obj(tmp_path / 'box.obj')
        loaded = TriMesh.load_obj(tmp_path / 'box.obj')
        assert np.allclose(loaded.vertices, box.vertices)
        assert np.array_equal(loaded.faces, box.faces)

    def test_zero_area_face_rejected(self):
        with pytest.raises(DegenerateInput):
            TriMesh(np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]]), np.array([[0, 1, 2]]))

    def test_samples_lie_on_box_surface(self):
        pts = sample_surface(make_box(0.2), 500, seed=4)
        assert np.allclose(np.abs(pts).max(axis=1), 0.1, atol=1e-12)

    def test_sampling_deterministic(self):
        box = make_box(0.2)
        assert np.array_equal(sample_surface(box, 50, 9), sample_surface(box, 50, 9))

    def test_unit_square_samples_centre_on_centroid(self):
        square = TriMesh(np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]]), np.array([[0, 1, 2], [0, 2, 3]]))
        pts = sample_surface(square, 10000, seed=7)
        assert np.allclose(pts.mean(axis=0), [0.5, 0.5, 0.0], atol=0.02)
        assert pts[:, :2].min() >= 0.0 and pts[:, :2].max() <= 1.0

    def test_barycentric_weights_are_convex(self):
        face_ids, bary = sample_surface_barycentric(make_uv_sphere(0.1, 8, 8), 2000, seed=8)
        assert bary.shape == (2000, 3)
        assert bary.min() >= 0.0
        assert np.allclose(bary.sum(axis=1), 1.0, atol=1e-12)
        assert face_ids.min() >= 0
