import os
import sys

import numpy as np
import pytest

# Add the repository root to the path for package imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from src.config import SceneSection
from src.errors import ShapeMismatch, TooShort
from src.evaluation import EvalReport, cd_per_frame, cd_window, evaluate_sequence, human_point_cloud
from src.geometry import PoseSequence, random_rotation
from src.simulate import generate_scene


def point_sequences(frames=12, seed=0):
    rng = np.random.default_rng(seed)
    humans = rng.normal(scale=0.3, size=(frames, 40, 3))
    objects = rng.normal(scale=0.1, size=(frames, 25, 3)) + np.array([0.0, 0.0, 1.0])
    return humans, objects


class TestPerFrame:
    """Chamfer distance after holistic alignment of one frame"""

    def setup_method(self):
        humans, objects = point_sequences()
        self.human, self.obj = humans[0], objects[0]

    def test_identical_sets(self):
        human, obj = cd_per_frame(self.human, self.obj, self.human, self.obj)
        assert human == pytest.approx(0.0, abs=1e-6)
        assert obj == pytest.approx(0.0, abs=1e-6)

    def test_invariant_to_common_rigid_transform(self):
        rotation = random_rotation(np.random.default_rng(3))
        shift = np.array([0.5, -1.0, 2.0])
        human = self.human @ rotation.T + shift
        obj = self.obj @ rotation.T + shift
        result = cd_per_frame(human, obj, self.human, self.obj, with_scale=False)
        assert result == pytest.approx((0.0, 0.0), abs=1e-6)

    def test_scale_removed_only_with_similarity(self):
        human, obj = 1.5 * self.human, 1.5 * self.obj
        assert cd_per_frame(human, obj, self.human, self.obj)[1] == pytest.approx(0.0, abs=1e-6)
        assert cd_per_frame(human, obj, self.human, self.obj, with_scale=False)[1] > 0.1

    def test_point_sets_must_correspond(self):
        with pytest.raises(ShapeMismatch):
            cd_per_frame(self.human[:10], self.obj, self.human, self.obj)


class TestWindowed:
    """Chamfer distance over windows with one alignment each"""

    def setup_method(self):
        self.humans, self.objects = point_sequences(frames=12)

    def test_identical_sequences(self):
        result = cd_window(self.humans, self.objects, self.humans, self.objects, window_seconds=0.2, fps=30.0)
        assert result == pytest.approx((0.0, 0.0), abs=1e-6)

    def test_drift_is_hidden_per_frame_but_not_per_window(self):
        drift = np.arange(12)[:, None, None] * np.array([0.1, 0.0, 0.0])
        pred_h, pred_o = self.humans + drift, self.objects + drift
        per_frame = np.mean([cd_per_frame(pred_h[t], pred_o[t], self.humans[t], self.objects[t])[1]
                             for t in range(12)])
        windowed = cd_window(pred_h, pred_o, self.humans, self.objects, window_seconds=0.4, fps=30.0)[1]
        assert per_frame == pytest.approx(0.0, abs=1e-6)
        assert windowed > 1.0

    def test_single_frame_window_equals_per_frame_mean(self):
        rng = np.random.default_rng(5)
        pred_h = self.humans + rng.normal(scale=0.01, size=self.humans.shape)
        pred_o = self.objects + rng.normal(scale=0.01, size=self.objects.shape)
        per_frame = np.array([cd_per_frame(pred_h[t], pred_o[t], self.humans[t], self.objects[t])
                              for t in range(12)])
        windowed = cd_window(pred_h, pred_o, self.humans, self.objects, window_seconds=1 / 30, fps=30.0)
        assert windowed == pytest.approx(tuple(per_frame.mean(axis=0)))

    def test_partial_window_dropped(self):
        result = cd_window(self.humans[:11], self.objects[:11], self.humans[:11], self.objects[:11],
                           window_seconds=0.2, fps=30.0)
        assert result == pytest.approx((0.0, 0.0), abs=1e-6)

    def test_thread_count_does_not_change_result(self):
        pred_h = self.humans + 0.01
        pred_o = self.objects[::-1].copy()
        a = cd_window(pred_h, pred_o, self.humans, self.objects, 0.1, 30.0, threads=1)
        b = cd_window(pred_h, pred_o, self.humans, self.objects, 0.1, 30.0, threads=3)
        assert a == b

    def test_too_short(self):
        with pytest.raises(TooShort):
            cd_window(self.humans[:5], self.objects[:5], self.humans[:5], self.objects[:5], 1.0, 30.0)


class TestHumanPointCloud:
    def test_joints_come_first(self):
        joints = np.random.default_rng(0).normal(size=(52, 3))
        cloud = human_point_cloud(joints, radius=0.05, samples_per_joint=4)
        assert cloud.shape == (52 * 5, 3)
        assert np.array_equal(cloud[:52], joints)
        shell = cloud[52:].reshape(52, 4, 3) - joints[:, None, :]
        assert np.allclose(np.linalg.norm(shell, axis=-1), 0.05)

    def test_joints_only(self):
        joints = np.zeros((3, 3))
        assert human_point_cloud(joints, samples_per_joint=0).shape == (3, 3)


class TestEvaluateSequence:
    """Report over a simulated capture"""

    def setup_method(self):
        self.scene = generate_scene(SceneSection(duration=0.5), seed=0, render=False)

    def evaluate(self, trajectory, **kwargs):
        scene = self.scene
        kwargs.setdefault('clip_short', True)
        return evaluate_sequence(trajectory, scene.motion, scene.trajectory, scene.motion, scene.skeleton,
                                 scene.mesh, sequence_id='unit', object_samples=50, **kwargs)

    def test_identical_prediction_scores_zero(self):
        report = self.evaluate(self.scene.trajectory)
        assert report.per_frame_object == pytest.approx(0.0, abs=1e-6)
        assert report.window_human == pytest.approx(0.0, abs=1e-6)
        assert len(report.breakdown) == len(self.scene)

    def test_short_sequence_uses_one_window(self):
        report = self.evaluate(self.scene.trajectory, window_seconds=10.0)
        assert report.window_frames == len(self.scene)
        assert report.window_seconds == pytest.approx(len(self.scene) / self.scene.trajectory.fps)

    def test_short_sequence_without_clipping_is_too_short(self):
        with pytest.raises(TooShort):
            self.evaluate(self.scene.trajectory, window_seconds=10.0, clip_short=False)

    def test_object_offset_raises_object_error(self):
        truth = self.scene.trajectory
        shifted = PoseSequence.from_arrays(truth.rotations, truth.translations + [0.0, 0.05, 0.0],
                                           truth.frame_interval)
        report = self.evaluate(shifted, with_scale=False)
        assert report.per_frame_object > 0.1
        assert report.alignment == 'rigid'

    def test_frame_count_checked(self):
        truth = self.scene.trajectory
        short = PoseSequence(truth.frames[:5], truth.frame_interval)
        with pytest.raises(ShapeMismatch):
            self.evaluate(short)

    def test_report_serialization(self):
        report = self.evaluate(self.scene.trajectory)
        data = report.to_dict()
        assert data['sequence_id'] == 'unit'
        assert data['alignment'] == 'similarity'
        assert EvalReport(**data) == report
        text = report.format_text()
        assert 'sequence: unit' in text
        assert 'per-frame' in text
