"""
Over-parameterized interaction state: one 486-vector per frame holding joint
positions and rotations of the 52-joint body+hands, the object pose, and the
raw inertial rotation and free acceleration.

Layout (offsets into the vector):
    j_h    0:156   52 joint positions (m)
    θ_h  156:468   52 joint rotations (6D, local; joint 0 is the body orientation)
    j_o  468:471   object translation (m)
    θ_o  471:477   object rotation (6D)
    q    477:483   inertial rotation in the world frame (6D)
    a    483:486   free acceleration in the world frame (m/s²)

The condition c gathers the body, object and IMU slices; m holds the hand
slices and may be masked.
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import InvalidInput, ShapeMismatch, TooShort
from .geometry import PoseSequence, matrix_to_rot6d, rot6d_to_matrix
from .imu import ImuStream, apply_calibration
from .logging_config import get_logger
from .skeleton import BODY_JOINTS, HAND_JOINTS, SkeletonModel, SkeletonMotion

logger = get_logger(__name__)

JOINTS = BODY_JOINTS + HAND_JOINTS

J_H = slice(0, 3 * JOINTS)
THETA_H = slice(J_H.stop, J_H.stop + 6 * JOINTS)
J_O = slice(THETA_H.stop, THETA_H.stop + 3)
THETA_O = slice(J_O.stop, J_O.stop + 6)
Q = slice(THETA_O.stop, THETA_O.stop + 6)
A = slice(Q.stop, Q.stop + 3)
STATE_DIM = A.stop

J_HB = slice(J_H.start, J_H.start + 3 * BODY_JOINTS)
J_HH = slice(J_HB.stop, J_H.stop)
THETA_HB = slice(THETA_H.start, THETA_H.start + 6 * BODY_JOINTS)
THETA_HH = slice(THETA_HB.stop, THETA_H.stop)


def _indices(*parts: slice) -> np.ndarray:
    return np.concatenate([np.arange(p.start, p.stop) for p in parts])


CONDITION_INDEX = _indices(J_HB, J_O, THETA_HB, THETA_O, Q, A)
HAND_INDEX = _indices(J_HH, THETA_HH)
CONDITION_DIM = len(CONDITION_INDEX)
HAND_DIM = len(HAND_INDEX)

assert STATE_DIM == 486 and CONDITION_DIM == 216 and HAND_DIM == 270


@dataclass(frozen=True)
class InteractionState:
    """Accessor view over a single frame vector."""
    vector: np.ndarray

    def __post_init__(self):
        vector = np.asarray(self.vector, dtype=np.float64)
        if vector.shape != (STATE_DIM,):
            raise ShapeMismatch(f'interaction state must have {STATE_DIM} entries, got {vector.shape}')
        object.__setattr__(self, 'vector', vector)

    @property
    def joint_positions(self) -> np.ndarray:
        return self.vector[J_H].reshape(JOINTS, 3)

    @property
    def joint_rotations_6d(self) -> np.ndarray:
        return self.vector[THETA_H].reshape(JOINTS, 6)

    @property
    def object_translation(self) -> np.ndarray:
        return self.vector[J_O]

    @property
    def object_rotation_6d(self) -> np.ndarray:
        return self.vector[THETA_O]

    @property
    def imu_rotation_6d(self) -> np.ndarray:
        return self.vector[Q]

    @property
    def free_acceleration(self) -> np.ndarray:
        return self.vector[A]


@dataclass(frozen=True)
class ConditionTuple:
    """Window of conditions: c (W, 216), hand motion m (W, 270) and whether m is valid."""
    c: np.ndarray
    m: np.ndarray
    hand_valid: bool

    def __post_init__(self):
        c = np.asarray(self.c, dtype=np.float64)
        m = np.asarray(self.m, dtype=np.float64)
        if c.shape[-1] != CONDITION_DIM or m.shape[-1] != HAND_DIM or c.shape[:-1] != m.shape[:-1]:
            raise ShapeMismatch(f'condition shapes {c.shape} / {m.shape} do not match the state layout')
        object.__setattr__(self, 'c', c)
        object.__setattr__(self, 'm', m)


def split_condition(states: np.ndarray, hand_valid: bool = True) -> ConditionTuple:
    """Gather c and m from states (..., 486); masked hands are zero-filled."""
    states = np.asarray(states, dtype=np.float64)
    if states.shape[-1] != STATE_DIM:
        raise ShapeMismatch(f'expected trailing dimension {STATE_DIM}, got {states.shape}')
    m = states[..., HAND_INDEX]
    if not hand_valid:
        m = np.zeros_like(m)
    return ConditionTuple(states[..., CONDITION_INDEX], m, hand_valid)


def merge_condition(c: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Inverse of split_condition for a valid hand slice."""
    c = np.asarray(c, dtype=np.float64)
    states = np.zeros(c.shape[:-1] + (STATE_DIM,))
    states[..., CONDITION_INDEX] = c
    states[..., HAND_INDEX] = m
    return states


def build_interaction_states(skel: SkeletonModel, motion: SkeletonMotion, trajectory: PoseSequence,
                             imu_rotations: np.ndarray, free_accelerations: np.ndarray) -> np.ndarray:
    """
    Stack per-frame states (T, 486) from human motion, object poses and the
    world-frame IMU signals.
    """
    if skel.joint_count != JOINTS:
        raise ShapeMismatch(f'interaction states need a {JOINTS}-joint skeleton, got {skel.joint_count}')
    count = len(trajectory)
    imu_rotations = np.asarray(imu_rotations, dtype=np.float64)
    free_accelerations = np.asarray(free_accelerations, dtype=np.float64)
    if len(motion) != count or len(imu_rotations) != count or len(free_accelerations) != count:
        raise ShapeMismatch(f'motion ({len(motion)}), IMU ({len(imu_rotations)}, {len(free_accelerations)}) '
                            f'and trajectory ({count}) lengths differ')

    states = np.zeros((count, STATE_DIM))
    states[:, J_H] = motion.joint_positions(skel).reshape(count, -1)
    states[:, THETA_H] = matrix_to_rot6d(motion.rotations).reshape(count, -1)
    states[:, J_O] = trajectory.translations
    states[:, THETA_O] = matrix_to_rot6d(trajectory.rotations)
    states[:, Q] = matrix_to_rot6d(imu_rotations)
    states[:, A] = free_accelerations
    return states


def capture_states(skel: SkeletonModel, motion: SkeletonMotion, trajectory: PoseSequence, imu: ImuStream,
                   imu_to_world: np.ndarray) -> np.ndarray:
    """States of a capture whose IMU is expressed in its own frame; ``imu_to_world`` calibrates it."""
    rotations, free = apply_calibration(imu.rotations, imu.free_accelerations(), np.asarray(imu_to_world))
    return build_interaction_states(skel, motion, trajectory, rotations, free)


def states_to_results(states: np.ndarray, skel: SkeletonModel, frame_interval: float,
                      scale: float = 1.0) -> Tuple[PoseSequence, SkeletonMotion]:
    """Object poses and human motion read back from states (T, 486)."""
    states = np.asarray(states, dtype=np.float64)
    if states.ndim != 2 or states.shape[1] != STATE_DIM:
        raise ShapeMismatch(f'expected (T, {STATE_DIM}) states, got {states.shape}')
    count = len(states)
    object_rotations = rot6d_to_matrix(states[:, THETA_O])
    trajectory = PoseSequence.from_arrays(object_rotations.reshape(count, 3, 3), states[:, J_O], frame_interval)
    joints = states[:, J_H].reshape(count, JOINTS, 3)
    rotations = rot6d_to_matrix(states[:, THETA_H].reshape(count, JOINTS, 6))
    roots = joints[:, 0] - scale * skel.offsets[0]
    motion = SkeletonMotion(roots, rotations.reshape(count, JOINTS, 3, 3), frame_interval, scale)
    return trajectory, motion


def make_windows(states: np.ndarray, window: int, stride: int) -> np.ndarray:
    """Overlapping windows (N, W, 486); a trailing partial window is dropped."""
    states = np.asarray(states, dtype=np.float64)
    if window < 1 or stride < 1:
        raise InvalidInput(f'window ({window}) and stride ({stride}) must be positive')
    if len(states) < window:
        raise TooShort(f'{len(states)} frames cannot fill a window of {window}')
    starts = range(0, len(states) - window + 1, stride)
    windows = np.stack([states[s:s + window] for s in starts])
    logger.debug(f'Cut {len(windows)} windows of {window} frames (stride {stride})')
    return windows


def window_starts(count: int, window: int) -> np.ndarray:
    """Window start frames that cover every frame; the last window is flush with the end."""
    if count < window:
        raise TooShort(f'{count} frames cannot fill a window of {window}')
    starts = list(range(0, count - window + 1, window))
    if starts[-1] + window < count:
        starts.append(count - window)
    return np.array(starts)
