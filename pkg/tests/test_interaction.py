import os
import sys

import numpy as np
import pytest

# Add the repository root to the path for package imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from src.config import SceneSection
from src.errors import ShapeMismatch, TooShort
from src.geometry import matrix_to_rot6d
from src.interaction import (A, CONDITION_DIM, CONDITION_INDEX, HAND_DIM, HAND_INDEX, J_H, J_O, Q, STATE_DIM,
                             THETA_O, ConditionTuple, InteractionState, build_interaction_states, capture_states,
                             make_windows, merge_condition, split_condition, states_to_results, window_starts)
from src.skeleton import SkeletonModel
from src.simulate import generate_scene


class TestLayout:
    """Slices of the 486-vector"""

    def test_dimensions(self):
        assert STATE_DIM == 486
        assert CONDITION_DIM == 216
        assert HAND_DIM == 270

    def test_condition_and_hands_partition_the_state(self):
        combined = np.sort(np.concatenate([CONDITION_INDEX, HAND_INDEX]))
        assert np.array_equal(combined, np.arange(STATE_DIM))

    def test_object_and_imu_slices(self):
        assert (J_O.start, THETA_O.start, Q.start, A.start, A.stop) == (468, 471, 477, 483, 486)

    def test_state_accessors(self):
        vector = np.arange(STATE_DIM, dtype=np.float64)
        state = InteractionState(vector)
        assert state.joint_positions.shape == (52, 3)
        assert state.joint_rotations_6d.shape == (52, 6)
        assert np.array_equal(state.free_acceleration, [483.0, 484.0, 485.0])
        with pytest.raises(ShapeMismatch):
            InteractionState(np.zeros(10))


class TestConditions:
    """Condition split and merge"""

    def setup_method(self):
        self.states = np.random.default_rng(0).normal(size=(4, STATE_DIM))

    def test_merge_inverts_split(self):
        cond = split_condition(self.states)
        assert cond.c.shape == (4, CONDITION_DIM)
        assert np.array_equal(merge_condition(cond.c, cond.m), self.states)

    def test_masked_hands_are_zero(self):
        cond = split_condition(self.states, hand_valid=False)
        assert not cond.hand_valid
        assert np.all(cond.m == 0.0)
        assert np.array_equal(cond.c, self.states[:, CONDITION_INDEX])

    def test_shape_checked(self):
        with pytest.raises(ShapeMismatch):
            ConditionTuple(np.zeros((4, CONDITION_DIM)), np.zeros((3, HAND_DIM)), True)
        with pytest.raises(ShapeMismatch):
            split_condition(np.zeros((4, 100)))


class TestCaptureStates:
    """States assembled from a synthetic capture"""

    def setup_method(self):
        cfg = SceneSection(duration=0.5, imu_to_world_rotvec=[0.2, -0.1, 0.4])
        self.scene = generate_scene(cfg, seed=0, render=False)
        self.states = capture_states(self.scene.skeleton, self.scene.motion, self.scene.trajectory,
                                     self.scene.imu, self.scene.imu_to_world)

    def test_slices_hold_inputs(self):
        count = len(self.scene)
        assert self.states.shape == (count, STATE_DIM)
        joints = self.scene.motion.joint_positions(self.scene.skeleton)
        assert np.allclose(self.states[:, J_H], joints.reshape(count, -1))
        assert np.allclose(self.states[:, J_O], self.scene.trajectory.translations)
        assert np.allclose(self.states[:, Q], matrix_to_rot6d(self.scene.trajectory.rotations))
        assert np.allclose(self.states[:, A], self.scene.free_acceleration, atol=1e-9)

    def test_results_round_trip(self):
        trajectory, motion = states_to_results(self.states, self.scene.skeleton,
                                               self.scene.trajectory.frame_interval)
        assert np.allclose(trajectory.translations, self.scene.trajectory.translations)
        assert np.allclose(trajectory.rotations, self.scene.trajectory.rotations)
        assert np.allclose(motion.joint_positions(self.scene.skeleton),
                           self.scene.motion.joint_positions(self.scene.skeleton))

    def test_skeleton_size_checked(self):
        small = SkeletonModel((-1, 0), np.zeros((2, 3)))
        with pytest.raises(ShapeMismatch):
            build_interaction_states(small, self.scene.motion, self.scene.trajectory,
                                     self.scene.trajectory.rotations, self.scene.free_acceleration)

    def test_length_checked(self):
        with pytest.raises(ShapeMismatch):
            build_interaction_states(self.scene.skeleton, self.scene.motion, self.scene.trajectory,
                                     self.scene.trajectory.rotations[:3], self.scene.free_acceleration)


class TestWindows:
    """Training windows and refinement coverage"""

    def setup_method(self):
        self.states = np.arange(30 * STATE_DIM, dtype=np.float64).reshape(30, STATE_DIM)

    def test_window_count(self):
        windows = make_windows(self.states, 8, 4)
        assert windows.shape == (6, 8, STATE_DIM)
        assert np.array_equal(windows[1], self.states[4:12])

    def test_too_short(self):
        with pytest.raises(TooShort):
            make_windows(self.states[:5], 8, 4)

    def test_starts_cover_every_frame(self):
        assert list(window_starts(30, 8)) == [0, 8, 16, 22]
        assert list(window_starts(16, 8)) == [0, 8]
        with pytest.raises(TooShort):
            window_starts(5, 8)
