"""
Capture metrics: per-frame and windowed Chamfer distance after one holistic
Procrustes alignment of the combined human and object points.

The "human mesh" is the joint cloud plus small spheres sampled around every
joint; object points are template surface samples posed per frame, so
predicted and ground-truth points correspond one to one.
"""

from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Tuple

import numpy as np

from .errors import ShapeMismatch, TooShort
from .geometry import (PoseSequence, TriMesh, apply_similarity, chamfer_distance, points_from_barycentric,
                       procrustes_align, sample_surface_barycentric)
from .logging_config import get_logger, log_performance
from .skeleton import SkeletonModel, SkeletonMotion
from .utils import format_table, ordered_map

logger = get_logger(__name__)

HUMAN_MODEL_NOTE = 'skeleton joints plus sphere samples around each joint'


def sphere_directions(count: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((count, 3))
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def human_point_cloud(joints: np.ndarray, radius: float = 0.02, samples_per_joint: int = 8,
                      seed: int = 0) -> np.ndarray:
    """Joints (J, 3) followed by ``samples_per_joint`` points on a sphere around each."""
    joints = np.asarray(joints, dtype=np.float64).reshape(-1, 3)
    if samples_per_joint == 0:
        return joints.copy()
    dirs = sphere_directions(samples_per_joint, seed)
    shell = joints[:, None, :] + radius * dirs[None, :, :]
    return np.concatenate([joints, shell.reshape(-1, 3)])


def _aligned_parts(pred_human: np.ndarray, pred_object: np.ndarray, gt_human: np.ndarray,
                   gt_object: np.ndarray, with_scale: bool) -> Tuple[float, float]:
    pred_human = np.asarray(pred_human, dtype=np.float64).reshape(-1, 3)
    pred_object = np.asarray(pred_object, dtype=np.float64).reshape(-1, 3)
    gt_human = np.asarray(gt_human, dtype=np.float64).reshape(-1, 3)
    gt_object = np.asarray(gt_object, dtype=np.float64).reshape(-1, 3)
    if pred_human.shape != gt_human.shape or pred_object.shape != gt_object.shape:
        raise ShapeMismatch('predicted and ground-truth point sets must correspond')
    rotation, translation, scale = procrustes_align(np.concatenate([pred_human, pred_object]),
                                                    np.concatenate([gt_human, gt_object]), with_scale)
    human = chamfer_distance(apply_similarity(pred_human, rotation, translation, scale), gt_human)
    obj = chamfer_distance(apply_similarity(pred_object, rotation, translation, scale), gt_object)
    return human, obj


def cd_per_frame(pred_human: np.ndarray, pred_object: np.ndarray, gt_human: np.ndarray,
                 gt_object: np.ndarray, with_scale: bool = True) -> Tuple[float, float]:
    """(human, object) Chamfer distance in cm after one alignment of the combined points."""
    return _aligned_parts(pred_human, pred_object, gt_human, gt_object, with_scale)


def window_frames(window_seconds: float, fps: float) -> int:
    return max(1, int(round(window_seconds * fps)))


def cd_window(pred_humans: np.ndarray, pred_objects: np.ndarray, gt_humans: np.ndarray, gt_objects: np.ndarray,
              window_seconds: float = 10.0, fps: float = 30.0, with_scale: bool = True,
              threads: int = 1) -> Tuple[float, float]:
    """
    Mean over non-overlapping windows of the windowed Chamfer distance;
    sequences are (T, N, 3) and a trailing partial window is dropped.
    """
    pred_humans, gt_humans = np.asarray(pred_humans), np.asarray(gt_humans)
    pred_objects, gt_objects = np.asarray(pred_objects), np.asarray(gt_objects)
    if pred_humans.shape != gt_humans.shape or pred_objects.shape != gt_objects.shape \
            or len(pred_humans) != len(pred_objects):
        raise ShapeMismatch('predicted and ground-truth sequences must correspond')
    size = window_frames(window_seconds, fps)
    count = len(pred_humans) // size
    if count == 0:
        raise TooShort(f'{len(pred_humans)} frames do not cover one {window_seconds} s window ({size} frames)')

    def one_window(k: int) -> Tuple[float, float]:
        span = slice(k * size, (k + 1) * size)
        return _aligned_parts(pred_humans[span], pred_objects[span], gt_humans[span], gt_objects[span], with_scale)

    results = np.array(ordered_map(one_window, range(count), threads))
    return float(results[:, 0].mean()), float(results[:, 1].mean())


@dataclass
class EvalReport:
    sequence_id: str
    fps: float
    alignment: str
    window_seconds: float
    window_frames: int
    per_frame_human: float
    per_frame_object: float
    window_human: float
    window_object: float
    breakdown: List[Dict[str, float]] = field(default_factory=list)
    human_model: str = HUMAN_MODEL_NOTE

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def format_text(self) -> str:
        summary = format_table(
            ['metric', 'human_cm', 'object_cm'],
            [['per-frame', self.per_frame_human, self.per_frame_object],
             [f'window {self.window_seconds:g}s', self.window_human, self.window_object]],
            precision=4)
        header = (f'sequence: {self.sequence_id}\nfps: {self.fps:g}\nalignment: {self.alignment}\n'
                  f'frames: {len(self.breakdown)} (window {self.window_frames} frames)\n'
                  f'human model: {self.human_model}\n')
        return header + '\n' + summary + '\n'


def sequence_points(trajectory: PoseSequence, motion: SkeletonMotion, skeleton: SkeletonModel, mesh: TriMesh,
                    object_samples: int, human_radius: float, human_samples_per_joint: int,
                    seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-frame corresponding human (T, Nh, 3) and object (T, No, 3) point sets."""
    face_ids, bary = sample_surface_barycentric(mesh, object_samples, seed)
    template = points_from_barycentric(mesh.vertices, mesh.faces, face_ids, bary)
    objects = np.einsum('tij,nj->tni', trajectory.rotations, template) + trajectory.translations[:, None, :]
    joints = motion.joint_positions(skeleton)
    humans = np.stack([human_point_cloud(j, human_radius, human_samples_per_joint, seed) for j in joints])
    return humans, objects


@log_performance(logger)
def evaluate_sequence(pred_trajectory: PoseSequence, pred_motion: SkeletonMotion, gt_trajectory: PoseSequence,
                      gt_motion: SkeletonMotion, skeleton: SkeletonModel, mesh: TriMesh,
                      sequence_id: str = 'sequence', window_seconds: float = 10.0, with_scale: bool = True,
                      object_samples: int = 500, human_radius: float = 0.02, human_samples_per_joint: int = 8,
                      seed: int = 0, threads: int = 1, clip_short: bool = False) -> EvalReport:
    """
    Per-frame and windowed Chamfer distances of a predicted capture.

    A sequence shorter than one window raises TooShort unless ``clip_short``,
    which evaluates it as a single window of its own length.
    """
    if len(pred_trajectory) != len(gt_trajectory) or len(pred_motion) != len(gt_motion) \
            or len(pred_trajectory) != len(pred_motion):
        raise ShapeMismatch('prediction and ground truth must have the same frame count')
    fps = gt_trajectory.fps
    count = len(gt_trajectory)
    seconds = window_seconds
    if count < window_frames(window_seconds, fps):
        if not clip_short:
            raise TooShort(f'sequence of {count} frames is shorter than one {window_seconds} s window')
        seconds = count / fps
        logger.warning(f'Sequence of {count} frames is shorter than the {window_seconds} s window; '
                       f'using one {seconds:.3f} s window')

    pred_h, pred_o = sequence_points(pred_trajectory, pred_motion, skeleton, mesh, object_samples,
                                     human_radius, human_samples_per_joint, seed)
    gt_h, gt_o = sequence_points(gt_trajectory, gt_motion, skeleton, mesh, object_samples,
                                 human_radius, human_samples_per_joint, seed)

    per_frame = ordered_map(lambda t: cd_per_frame(pred_h[t], pred_o[t], gt_h[t], gt_o[t], with_scale),
                            range(len(gt_h)), threads)
    breakdown = [{'frame': t, 'human_cd': h, 'object_cd': o} for t, (h, o) in enumerate(per_frame)]

    window_h, window_o = cd_window(pred_h, pred_o, gt_h, gt_o, seconds, fps, with_scale, threads)

    per_frame = np.array(per_frame)
    report = EvalReport(
        sequence_id=sequence_id, fps=fps, alignment='similarity' if with_scale else 'rigid',
        window_seconds=seconds, window_frames=window_frames(seconds, fps),
        per_frame_human=float(per_frame[:, 0].mean()), per_frame_object=float(per_frame[:, 1].mean()),
        window_human=window_h, window_object=window_o, breakdown=breakdown)
    logger.info(f'{sequence_id}: per-frame CD human {report.per_frame_human:.3f} cm, '
                f'object {report.per_frame_object:.3f} cm; window CD human {window_h:.3f} cm, '
                f'object {window_o:.3f} cm')
    return report
