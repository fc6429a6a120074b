"""
Rigid kinematic tree standing in for the parametric body model, with numpy
and torch forward kinematics.

Joint 0 is the root. Its local rotation is the global body orientation and its
position is root_translation + R_root·(scale·offset_0). Every other joint j sits
at p_parent + G_parent·(scale·offset_j) with G_j = G_parent·L_j.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import torch

from .errors import InvalidInput, ShapeMismatch
from .geometry import RigidPose, matrix_to_rot6d, rot6d_to_matrix
from .logging_config import get_logger

logger = get_logger(__name__)

DEFAULT_SKELETON_PATH = Path(__file__).parent / 'data' / 'smplh_skeleton.json'
BODY_JOINTS = 22
HAND_JOINTS = 30
LEFT_WRIST = 20
RIGHT_WRIST = 21
LEFT_ANKLE = 7


@dataclass(frozen=True)
class SkeletonModel:
    parents: Tuple[int, ...]
    offsets: np.ndarray
    names: Tuple[str, ...] = field(default=())

    def __post_init__(self):
        parents = tuple(int(p) for p in self.parents)
        offsets = np.asarray(self.offsets, dtype=np.float64).reshape(-1, 3)
        if not parents or parents[0] != -1:
            raise InvalidInput('skeleton root (joint 0) must have parent -1')
        if len(offsets) != len(parents):
            raise ShapeMismatch(f'{len(parents)} parents but {len(offsets)} offsets')
        for j, p in enumerate(parents[1:], start=1):
            # parents must precede children, which also rules out cycles
            if not 0 <= p < j:
                raise InvalidInput(f'joint {j} has parent {p}; parents must precede their children')
        if not np.all(np.isfinite(offsets)):
            raise InvalidInput('skeleton offsets must be finite')
        if self.names and len(self.names) != len(parents):
            raise ShapeMismatch(f'{len(parents)} joints but {len(self.names)} names')
        object.__setattr__(self, 'parents', parents)
        object.__setattr__(self, 'offsets', offsets)
        object.__setattr__(self, 'names', tuple(self.names))

    @property
    def joint_count(self) -> int:
        return len(self.parents)

    def bone_lengths(self, scale: float = 1.0) -> np.ndarray:
        """Distance of every non-root joint to its parent."""
        return scale * np.linalg.norm(self.offsets[1:], axis=1)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise InvalidInput(f'unknown joint name: {name}') from None

    @classmethod
    def from_dict(cls, data: dict) -> 'SkeletonModel':
        joints = data['joints']
        return cls(tuple(j['parent'] for j in joints),
                   np.array([j['offset'] for j in joints]),
                   tuple(j.get('name', f'joint{i}') for i, j in enumerate(joints)))

    def to_dict(self) -> dict:
        names = self.names or tuple(f'joint{i}' for i in range(self.joint_count))
        return {'joints': [{'name': n, 'parent': p, 'offset': o.tolist()}
                           for n, p, o in zip(names, self.parents, self.offsets)]}

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'SkeletonModel':
        with open(path, 'r', encoding='utf-8') as f:
            return cls.from_dict(json.load(f))

    @classmethod
    def default(cls) -> 'SkeletonModel':
        return cls.load(DEFAULT_SKELETON_PATH)

    def save(self, path: Union[str, Path]) -> None:
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2)


def forward_kinematics(skel: SkeletonModel, root_pose: RigidPose, joint_rotations: np.ndarray,
                       scale: float = 1.0) -> np.ndarray:
    """Global joint positions (J, 3) for per-joint local rotations (J, 3, 3)."""
    positions, _ = forward_kinematics_full(skel, root_pose, joint_rotations, scale)
    return positions


def forward_kinematics_full(skel: SkeletonModel, root_pose: RigidPose, joint_rotations: np.ndarray,
                            scale: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """Global joint positions (J, 3) and global rotations (J, 3, 3)."""
    local = np.asarray(joint_rotations, dtype=np.float64)
    if local.shape != (skel.joint_count, 3, 3):
        raise ShapeMismatch(f'expected {skel.joint_count} joint rotations, got shape {local.shape}')
    offsets = scale * skel.offsets
    positions = np.empty((skel.joint_count, 3))
    rotations = np.empty((skel.joint_count, 3, 3))
    rotations[0] = root_pose.rotation @ local[0]
    positions[0] = root_pose.translation + root_pose.rotation @ offsets[0]
    for j in range(1, skel.joint_count):
        p = skel.parents[j]
        rotations[j] = rotations[p] @ local[j]
        positions[j] = positions[p] + rotations[p] @ offsets[j]
    return positions, rotations


def forward_kinematics_torch(parents: Tuple[int, ...], offsets: torch.Tensor, root_translations: torch.Tensor,
                             local_rotations: torch.Tensor, scale: Union[float, torch.Tensor] = 1.0) -> torch.Tensor:
    """
    Batched differentiable FK with identity root pose rotation.

    root_translations (T, 3), local_rotations (T, J, 3, 3) -> positions (T, J, 3).
    """
    scaled = offsets * scale
    globals_: List[torch.Tensor] = [local_rotations[:, 0]]
    positions: List[torch.Tensor] = [root_translations + scaled[0]]
    for j in range(1, len(parents)):
        p = parents[j]
        positions.append(positions[p] + torch.einsum('tij,j->ti', globals_[p], scaled[j]))
        globals_.append(globals_[p] @ local_rotations[:, j])
    return torch.stack(positions, dim=1)


@dataclass(frozen=True)
class SkeletonMotion:
    """
    Per-frame human motion: root translations (T, 3) and local joint rotations
    (T, J, 3, 3); rotations[:, 0] is the global body orientation.
    """
    root_translations: np.ndarray
    rotations: np.ndarray
    frame_interval: float
    scale: float = 1.0

    def __post_init__(self):
        root = np.asarray(self.root_translations, dtype=np.float64).reshape(-1, 3)
        rotations = np.asarray(self.rotations, dtype=np.float64)
        if rotations.ndim != 4 or rotations.shape[0] != len(root) or rotations.shape[2:] != (3, 3):
            raise ShapeMismatch(f'rotations must be (T, J, 3, 3) with T={len(root)}, got {rotations.shape}')
        if not self.frame_interval > 0:
            raise InvalidInput('frame_interval must be positive')
        object.__setattr__(self, 'root_translations', root)
        object.__setattr__(self, 'rotations', rotations)

    def __len__(self) -> int:
        return len(self.root_translations)

    def joint_positions(self, skel: SkeletonModel) -> np.ndarray:
        """(T, J, 3) global joint positions."""
        identity = np.eye(3)
        return np.stack([
            forward_kinematics(skel, RigidPose(identity, t), r, self.scale)
            for t, r in zip(self.root_translations, self.rotations)
        ])

    def global_rotations(self, skel: SkeletonModel) -> np.ndarray:
        identity = np.eye(3)
        return np.stack([
            forward_kinematics_full(skel, RigidPose(identity, t), r, self.scale)[1]
            for t, r in zip(self.root_translations, self.rotations)
        ])

    def slice(self, start: int, stop: int) -> 'SkeletonMotion':
        return SkeletonMotion(self.root_translations[start:stop], self.rotations[start:stop],
                              self.frame_interval, self.scale)

    def to_dict(self) -> dict:
        return {
            'frame_interval': self.frame_interval,
            'scale': self.scale,
            'frames': [
                {'root_translation': t.tolist(), 'rotations_6d': matrix_to_rot6d(r).tolist()}
                for t, r in zip(self.root_translations, self.rotations)
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'SkeletonMotion':
        frames = data['frames']
        return cls(np.array([f['root_translation'] for f in frames]),
                   np.stack([rot6d_to_matrix(np.array(f['rotations_6d'])) for f in frames]),
                   float(data['frame_interval']), float(data.get('scale', 1.0)))


def attach_to_object(body_root: np.ndarray, body_rotations: np.ndarray, skel: SkeletonModel,
                     object_pose: RigidPose, attachment: RigidPose,
                     joint: int = RIGHT_WRIST, scale: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Rigidly move a body-frame pose so ``joint`` holds the object.

    ``attachment`` is the object pose in the joint frame. Returns the new root
    translation and local rotations (only the root rotation changes).
    """
    identity = np.eye(3)
    positions, rotations = forward_kinematics_full(skel, RigidPose(identity, body_root), body_rotations, scale)
    wrist_rot = object_pose.rotation @ attachment.rotation.T
    wrist_pos = object_pose.translation - wrist_rot @ attachment.translation
    align = wrist_rot @ rotations[joint].T
    shift = wrist_pos - align @ positions[joint]
    new_rotations = body_rotations.copy()
    new_rotations[0] = align @ body_rotations[0]
    return align @ positions[0] + shift - scale * skel.offsets[0], new_rotations


def default_skeleton(path: Optional[Union[str, Path]] = None) -> SkeletonModel:
    skel = SkeletonModel.load(path) if path else SkeletonModel.default()
    logger.debug(f'Loaded skeleton with {skel.joint_count} joints')
    return skel
