"""
Object pose tracking from silhouettes and IMU.

E = w_visual·E_visual + w_imu·E_imu over the whole sequence, with rotations in
6D form. Each frame first gets N_F corrective feedback steps driven by the
silhouette and area losses at the currently posed mesh; the sequence is then
optimized jointly with Adam.
"""

from dataclasses import dataclass, field, replace
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
import torch

from .errors import InvalidInput, NonFiniteEnergy, PreconditionViolation, ShapeMismatch, TooShort
from .geometry import (PoseSequence, RigidPose, TriMesh, axis_angle_to_matrix, geodesic_angle, matrix_to_rot6d,
                       points_from_barycentric, rot6d_to_matrix, rot6d_to_matrix_torch,
                       sample_surface_barycentric)
from .imu import GRAVITY, ImuStream
from .logging_config import get_logger, log_performance
from .render import (DEFAULT_FACE_CHUNK, DTYPE, Camera, SilhouetteMask, area_energy, mesh_tensors,
                     silhouette_energy, soft_silhouette_batch)
from .utils import ordered_map

logger = get_logger(__name__)

FEEDBACK_ITERATIONS = 3
FEEDBACK_SAMPLES = 400
FEEDBACK_STEP = 0.05
MAX_BACKTRACKS = 20
FRAME_BATCH = 16
LR_FLOOR = 0.01

AccelerationMode = Literal['physical', 'literal']


@dataclass(frozen=True)
class TrackProblem:
    mesh: TriMesh
    camera: Camera
    masks: Tuple[SilhouetteMask, ...]
    imu: ImuStream
    initial: PoseSequence
    w_visual: float = 20.0
    w_imu: float = 1e5
    sigma: float = 1.0
    lr: Optional[float] = None
    iterations: int = 300
    mode: AccelerationMode = 'physical'
    imu_to_world: np.ndarray = field(default_factory=lambda: np.eye(3))
    feedback_iterations: int = FEEDBACK_ITERATIONS
    feedback_samples: int = FEEDBACK_SAMPLES
    area_weight: float = 0.2
    skip_empty: bool = True
    seed: int = 0
    face_chunk: int = DEFAULT_FACE_CHUNK

    def __post_init__(self):
        masks = tuple(self.masks)
        object.__setattr__(self, 'masks', masks)
        object.__setattr__(self, 'imu_to_world', np.asarray(self.imu_to_world, dtype=np.float64).reshape(3, 3))
        count = len(self.initial)
        if len(masks) != count or len(self.imu) != count:
            raise ShapeMismatch(f'frame counts differ: {len(masks)} masks, {len(self.imu)} IMU samples, '
                                f'{count} initial poses')
        for k, mask in enumerate(masks):
            if mask.shape != self.camera.shape:
                raise ShapeMismatch(f'mask {k} is {mask.shape}, camera is {self.camera.shape}')
        if self.w_visual < 0 or self.w_imu < 0:
            raise InvalidInput('energy weights must be non-negative')
        if not 0 <= self.feedback_iterations <= FEEDBACK_ITERATIONS:
            raise InvalidInput(f'feedback_iterations must be within 0..{FEEDBACK_ITERATIONS}')
        if self.mode not in ('physical', 'literal'):
            raise InvalidInput(f'unknown acceleration mode: {self.mode}')

    @property
    def frame_interval(self) -> float:
        return self.initial.frame_interval

    @property
    def learning_rate(self) -> float:
        if self.lr is not None:
            return self.lr
        return 0.01 if self.initial.fps <= 30.0 else 5e-4

    def imu_targets(self) -> Tuple[np.ndarray, np.ndarray]:
        """World-frame rotations C(Q_t) and free accelerations A_t."""
        rotations = np.einsum('ij,tjk->tik', self.imu_to_world, self.imu.rotations)
        return rotations, self.imu.free_accelerations(GRAVITY) @ self.imu_to_world.T

    def observed(self) -> np.ndarray:
        """Frames that contribute to E_visual."""
        if not self.skip_empty:
            return np.ones(len(self.masks), dtype=bool)
        return np.array([not m.is_empty() for m in self.masks])


@dataclass(frozen=True)
class EnergyResult:
    value: float
    grad_rot6d: np.ndarray
    grad_translation: np.ndarray
    per_frame: Optional[np.ndarray] = None


@dataclass(frozen=True)
class FeedbackState:
    iteration: int
    pose: RigidPose
    samples: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)), repr=False)
    loss: float = float('nan')
    coverage: float = float('nan')
    delta_rotation: float = 0.0
    delta_translation: float = 0.0

    def __post_init__(self):
        if not 0 <= self.iteration <= FEEDBACK_ITERATIONS:
            raise InvalidInput(f'feedback iteration {self.iteration} outside 0..{FEEDBACK_ITERATIONS}')


@dataclass
class TrackResult:
    poses: PoseSequence
    energy_trace: List[float]
    best_trace: List[float]
    feedback_losses: List[List[float]]
    per_frame_visual: np.ndarray
    iterations: int

    def diagnostics(self) -> dict:
        return {
            'energy_trace': self.energy_trace,
            'best_trace': self.best_trace,
            'final_energy': self.best_trace[-1] if self.best_trace else None,
            'iterations': self.iterations,
            'feedback_losses': self.feedback_losses,
            'per_frame_visual': self.per_frame_visual.tolist(),
        }


# ---------------------------------------------------------------------------
# Energies (torch)
# ---------------------------------------------------------------------------

def _target_tensor(masks: Sequence[SilhouetteMask]) -> torch.Tensor:
    return torch.as_tensor(np.stack([m.values for m in masks]), dtype=DTYPE)


def visual_terms(problem: TrackProblem, rot6d: torch.Tensor, translations: torch.Tensor,
                 frames: Sequence[int], vertices: Optional[torch.Tensor] = None,
                 faces: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Per-frame Σ‖D − S‖² for the given frame indices."""
    if vertices is None or faces is None:
        vertices, faces = mesh_tensors(problem.mesh)
    index = torch.as_tensor(list(frames), dtype=torch.long)
    rendered = soft_silhouette_batch(vertices, faces, rot6d_to_matrix_torch(rot6d[index]), translations[index],
                                     problem.camera, problem.sigma, problem.face_chunk)
    return silhouette_energy(rendered, _target_tensor([problem.masks[i] for i in frames]))


def imu_terms(rotations: torch.Tensor, translations: torch.Tensor, imu_rotations: torch.Tensor,
              imu_acc: torch.Tensor, frame_interval: float,
              mode: AccelerationMode = 'physical') -> Tuple[torch.Tensor, torch.Tensor]:
    """
    (translation term, rotation term) of the IMU energy.

    translation: (1/(T−1))·Σ_{t=1..T−2} ‖T_{t−1} + T_{t+1} − 2T_t − X_t‖² with
    X_t = A_t·τ² (physical) or 0.5·A_t² elementwise (literal);
    rotation: (1/T)·Σ ‖R_t − C(Q_t)‖²_F.
    """
    count = translations.shape[0]
    if count < 3:
        raise TooShort(f'IMU energy needs at least 3 frames, got {count}')
    second = translations[:-2] + translations[2:] - 2.0 * translations[1:-1]
    acc = imu_acc[1:-1]
    expected = acc * frame_interval ** 2 if mode == 'physical' else 0.5 * acc ** 2
    translation_term = ((second - expected) ** 2).sum() / (count - 1)
    rotation_term = ((rotations - imu_rotations) ** 2).sum() / count
    return translation_term, rotation_term


def _leaf_params(poses: PoseSequence) -> Tuple[torch.Tensor, torch.Tensor]:
    rot6d = torch.tensor(matrix_to_rot6d(poses.rotations), dtype=DTYPE, requires_grad=True)
    translations = torch.tensor(poses.translations, dtype=DTYPE, requires_grad=True)
    return rot6d, translations


def _poses_from_params(rot6d: torch.Tensor, translations: torch.Tensor, frame_interval: float) -> PoseSequence:
    rotations = rot6d_to_matrix(rot6d.detach().numpy())
    return PoseSequence.from_arrays(rotations, translations.detach().numpy(), frame_interval)


# ---------------------------------------------------------------------------
# Public energies with gradients
# ---------------------------------------------------------------------------

def energy_visual(problem: TrackProblem, poses: PoseSequence, skip_empty: bool = False) -> EnergyResult:
    """Σ_t silhouette loss with gradients per frame pose; blank frames count unless ``skip_empty``."""
    if len(poses) != len(problem.masks):
        raise ShapeMismatch(f'{len(poses)} poses for {len(problem.masks)} masks')
    rot6d, translations = _leaf_params(poses)
    frames = [k for k in range(len(poses)) if not (skip_empty and problem.masks[k].is_empty())]
    per_frame = np.zeros(len(poses))
    vertices, faces = mesh_tensors(problem.mesh)
    for start in range(0, len(frames), FRAME_BATCH):
        batch = frames[start:start + FRAME_BATCH]
        terms = visual_terms(problem, rot6d, translations, batch, vertices, faces)
        terms.sum().backward()
        per_frame[batch] = terms.detach().numpy()
    grad_r = rot6d.grad if rot6d.grad is not None else torch.zeros_like(rot6d)
    grad_t = translations.grad if translations.grad is not None else torch.zeros_like(translations)
    return EnergyResult(float(per_frame.sum()), grad_r.numpy().copy(), grad_t.numpy().copy(), per_frame)


def energy_imu(poses: PoseSequence, imu: ImuStream, mode: AccelerationMode = 'physical',
               imu_to_world: Optional[np.ndarray] = None) -> EnergyResult:
    """IMU energy (translation + rotation terms) with gradients; per_frame holds the two terms."""
    if len(imu) != len(poses):
        raise ShapeMismatch(f'{len(imu)} IMU samples for {len(poses)} poses')
    transform = np.eye(3) if imu_to_world is None else np.asarray(imu_to_world)
    imu_rot = torch.as_tensor(np.einsum('ij,tjk->tik', transform, imu.rotations), dtype=DTYPE)
    imu_acc = torch.as_tensor(imu.free_accelerations(GRAVITY) @ transform.T, dtype=DTYPE)
    rot6d, translations = _leaf_params(poses)
    trans_term, rot_term = imu_terms(rot6d_to_matrix_torch(rot6d), translations, imu_rot, imu_acc,
                                     poses.frame_interval, mode)
    total = trans_term + rot_term
    total.backward()
    return EnergyResult(float(total.detach()), rot6d.grad.numpy().copy(), translations.grad.numpy().copy(),
                        np.array([float(trans_term.detach()), float(rot_term.detach())]))


# ---------------------------------------------------------------------------
# Feedback refinement
# ---------------------------------------------------------------------------

def _frame_loss(problem: TrackProblem, frame: int, rot6d: torch.Tensor, translation: torch.Tensor,
                vertices: torch.Tensor, faces: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    rendered = soft_silhouette_batch(vertices, faces, rot6d_to_matrix_torch(rot6d)[None], translation[None],
                                     problem.camera, problem.sigma, problem.face_chunk)
    return (silhouette_energy(rendered, target) + problem.area_weight * area_energy(rendered, target)).sum()


def feedback_refine(state: FeedbackState, problem: TrackProblem, frame: int,
                    step: float = FEEDBACK_STEP) -> FeedbackState:
    """
    One corrective increment for ``frame``.

    Samples N_S surface points of the currently posed mesh (coverage of their
    projections inside the mask is logged), then steps along the normalized
    negative gradient of silhouette + area loss, halving the step until the loss
    decreases; if no decrease is found the pose is kept.

    Raises:
        PreconditionViolation: state.iteration >= N_F
    """
    if state.iteration >= FEEDBACK_ITERATIONS:
        raise PreconditionViolation(f'feedback iteration {state.iteration} >= N_F = {FEEDBACK_ITERATIONS}')
    mask = problem.masks[frame]

    face_ids, bary = sample_surface_barycentric(problem.mesh, problem.feedback_samples,
                                                problem.seed + 1000 * frame + state.iteration)
    samples = points_from_barycentric(state.pose.apply(problem.mesh.vertices), problem.mesh.faces, face_ids, bary)
    uv, depth = problem.camera.project(samples)
    cols, rows = np.floor(uv[:, 0]).astype(int), np.floor(uv[:, 1]).astype(int)
    inside = (depth > 0) & (cols >= 0) & (cols < problem.camera.width) & (rows >= 0) & (rows < problem.camera.height)
    binary = mask.binary()
    covered = np.zeros(len(samples), dtype=bool)
    covered[inside] = binary[rows[inside], cols[inside]]
    coverage = float(covered.mean())

    vertices, faces = mesh_tensors(problem.mesh)
    target = torch.as_tensor(mask.values, dtype=DTYPE)[None]
    rot6d = torch.tensor(matrix_to_rot6d(state.pose.rotation), dtype=DTYPE, requires_grad=True)
    translation = torch.tensor(state.pose.translation, dtype=DTYPE, requires_grad=True)
    loss = _frame_loss(problem, frame, rot6d, translation, vertices, faces, target)
    loss.backward()
    current = float(loss.detach())
    gradient = torch.cat([rot6d.grad, translation.grad])
    norm = float(torch.linalg.norm(gradient))

    new_pose, new_loss = state.pose, current
    if np.isfinite(norm) and norm > 1e-12:
        direction = -(gradient / norm).detach()
        alpha = step
        with torch.no_grad():
            for _ in range(MAX_BACKTRACKS):
                cand_r6 = rot6d.detach() + alpha * direction[:6]
                cand_t = translation.detach() + alpha * direction[6:]
                cand_loss = float(_frame_loss(problem, frame, cand_r6, cand_t, vertices, faces, target))
                if cand_loss < current:
                    new_pose = RigidPose(rot6d_to_matrix(cand_r6.numpy()), cand_t.numpy())
                    new_loss = cand_loss
                    break
                alpha *= 0.5

    logger.debug(f'Feedback frame {frame} iteration {state.iteration}: loss {current:.6f} -> {new_loss:.6f}, '
                 f'coverage {coverage:.3f}')
    return FeedbackState(
        iteration=state.iteration + 1,
        pose=new_pose,
        samples=samples,
        loss=new_loss,
        coverage=coverage,
        delta_rotation=geodesic_angle(state.pose.rotation, new_pose.rotation),
        delta_translation=float(np.linalg.norm(new_pose.translation - state.pose.translation)),
    )


def refine_frame(problem: TrackProblem, frame: int, pose: RigidPose) -> Tuple[RigidPose, List[float]]:
    state = FeedbackState(0, pose)
    losses = []
    for _ in range(problem.feedback_iterations):
        state = feedback_refine(state, problem, frame)
        losses.append(state.loss)
    return state.pose, losses


# ---------------------------------------------------------------------------
# Joint tracking
# ---------------------------------------------------------------------------

@log_performance(logger)
def track(problem: TrackProblem, threads: int = 1) -> TrackResult:
    """
    Initialize rotations from the IMU, refine each observed frame, then minimize
    E jointly with Adam (cosine decay to 1% of the learning rate). Returns the
    best-so-far sequence.

    Raises:
        NonFiniteEnergy: the energy became NaN or infinite (carries the trace)
    """
    imu_rotations, imu_acc = problem.imu_targets()
    count = len(problem.initial)
    tau = problem.frame_interval
    observed = problem.observed()
    logger.info(f'Tracking {count} frames ({int(observed.sum())} observed), lr {problem.learning_rate}, '
                f'{problem.iterations} iterations, mode {problem.mode}')

    poses = [RigidPose(r, p.translation) for r, p in zip(imu_rotations, problem.initial.frames)]

    def refine(k: int) -> Tuple[RigidPose, List[float]]:
        if not observed[k] or problem.feedback_iterations == 0:
            return poses[k], []
        return refine_frame(problem, k, poses[k])

    refined = ordered_map(refine, range(count), threads)
    poses = [pose for pose, _ in refined]
    feedback_losses = [losses for _, losses in refined]

    rot6d, translations = _leaf_params(PoseSequence(tuple(poses), tau))
    imu_rot_t = torch.as_tensor(imu_rotations, dtype=DTYPE)
    imu_acc_t = torch.as_tensor(imu_acc, dtype=DTYPE)
    vertices, faces = mesh_tensors(problem.mesh)
    visual_frames = [k for k in range(count) if observed[k]]

    optimizer = torch.optim.Adam([rot6d, translations], lr=problem.learning_rate)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
        optimizer, T_max=max(problem.iterations, 1), eta_min=LR_FLOOR * problem.learning_rate)

    trace: List[float] = []
    best_trace: List[float] = []
    best = (float('inf'), rot6d.detach().clone(), translations.detach().clone())
    per_frame_best = np.zeros(count)

    for iteration in range(problem.iterations + 1):
        optimizer.zero_grad()
        total = 0.0
        per_frame = np.zeros(count)
        if problem.w_imu > 0 and count >= 3:
            trans_term, rot_term = imu_terms(rot6d_to_matrix_torch(rot6d), translations, imu_rot_t, imu_acc_t,
                                             tau, problem.mode)
            imu_energy = problem.w_imu * (trans_term + rot_term)
            imu_energy.backward()
            total += float(imu_energy.detach())
        if problem.w_visual > 0:
            for start in range(0, len(visual_frames), FRAME_BATCH):
                batch = visual_frames[start:start + FRAME_BATCH]
                terms = visual_terms(problem, rot6d, translations, batch, vertices, faces)
                (problem.w_visual * terms.sum()).backward()
                per_frame[batch] = terms.detach().numpy()
                total += problem.w_visual * float(terms.detach().sum())

        trace.append(total)
        if not np.isfinite(total):
            raise NonFiniteEnergy(f'energy became non-finite at iteration {iteration}', trace)
        if total < best[0]:
            best = (total, rot6d.detach().clone(), translations.detach().clone())
            per_frame_best = per_frame
        best_trace.append(best[0])
        logger.debug(f'Iteration {iteration}: E = {total:.6e}',
                     extra={'extra_fields': {'iteration': iteration, 'energy': total, 'best_energy': best[0]}})
        if iteration == problem.iterations:
            break
        optimizer.step()
        scheduler.step()

    logger.info(f'Tracking finished: E {trace[0]:.6e} -> best {best[0]:.6e}')
    result_poses = _poses_from_params(best[1], best[2], tau)
    return TrackResult(result_poses, trace, best_trace, feedback_losses, per_frame_best, problem.iterations)


def perturb_poses(poses: PoseSequence, rotation_deg: float, translation: float, seed: int) -> PoseSequence:
    """Random initial guess: per-frame axis-angle of ``rotation_deg`` and offset of norm ``translation``."""
    rng = np.random.default_rng(seed)
    frames = []
    for pose in poses.frames:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        delta = axis_angle_to_matrix(axis * np.radians(rotation_deg))
        frames.append(RigidPose(delta @ pose.rotation, pose.translation + translation * direction))
    return replace(poses, frames=tuple(frames))
