"""
Synthetic capture generator: object trajectories, target masks, object IMU,
human skeleton motion holding the object and an optional ankle IMU with a
jump for temporal synchronization.

Everything is deterministic given the scene section and the seed; per-frame
noise uses generators seeded by (seed, frame) so a thread pool cannot change
the result.
"""

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage
from scipy.interpolate import CubicSpline
from scipy.spatial.transform import Rotation, Slerp

from .config import SceneSection
from .errors import InvalidInput
from .geometry import PoseSequence, RigidPose, TriMesh, axis_angle_to_matrix
from .imu import GRAVITY, ImuNoise, ImuStream, simulate_imu
from .logging_config import get_logger, log_performance
from .render import Camera, SilhouetteMask, hard_silhouette
from .skeleton import BODY_JOINTS, SkeletonModel, SkeletonMotion, attach_to_object, default_skeleton
from .utils import ordered_map

logger = get_logger(__name__)

# object pose in the holding joint's frame
DEFAULT_ATTACHMENT = RigidPose(np.eye(3), np.array([-0.08, 0.0, -0.05]))


@dataclass(frozen=True)
class Scene:
    mesh: TriMesh
    camera: Camera
    trajectory: PoseSequence
    free_acceleration: np.ndarray
    imu: ImuStream
    masks: Tuple[SilhouetteMask, ...]
    skeleton: SkeletonModel
    motion: SkeletonMotion
    imu_to_world: np.ndarray
    sync_stream: Optional[ImuStream] = None
    sync_index: Optional[int] = None

    def __len__(self) -> int:
        return len(self.trajectory)


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

def _rz(angles: np.ndarray) -> np.ndarray:
    return Rotation.from_euler('z', angles).as_matrix()


def synthesize_trajectory(cfg: SceneSection) -> Tuple[PoseSequence, np.ndarray]:
    """Poses and exact world-frame accelerations for the configured kind."""
    count = cfg.frame_count
    if count < 1:
        raise InvalidInput(f'scene has no frames (duration {cfg.duration}s at {cfg.fps} fps)')
    tau = 1.0 / cfg.fps
    t = np.arange(count) * tau
    center = np.asarray(cfg.center, dtype=np.float64)

    if cfg.trajectory == 'static':
        translations = np.tile(center, (count, 1))
        rotations = np.tile(np.eye(3), (count, 1, 1))
        acc = np.zeros((count, 3))
    elif cfg.trajectory == 'linear':
        v, a = np.asarray(cfg.velocity), np.asarray(cfg.acceleration)
        translations = center + t[:, None] * v + 0.5 * t[:, None] ** 2 * a
        rotations = np.tile(np.eye(3), (count, 1, 1))
        acc = np.tile(a, (count, 1))
    elif cfg.trajectory == 'circular':
        phase = cfg.angular_rate * t
        ring = np.stack([np.cos(phase), np.sin(phase), np.zeros(count)], axis=1)
        translations = center + cfg.radius * ring
        rotations = _rz(phase + np.pi / 2.0)
        acc = -cfg.angular_rate ** 2 * cfg.radius * ring
    elif cfg.trajectory == 'tumbling':
        s1, s2 = cfg.spin_rates
        rotations = np.einsum('tij,tjk->tik', _rz(s1 * t), Rotation.from_euler('x', s2 * t).as_matrix())
        omega_bob = 2.0 * np.pi * cfg.bob_frequency
        bob = cfg.bob_amplitude * np.sin(omega_bob * t)
        translations = center + np.stack([np.zeros(count), np.zeros(count), bob], axis=1)
        acc = np.stack([np.zeros(count), np.zeros(count), -omega_bob ** 2 * bob], axis=1)
    elif cfg.trajectory == 'keyframes':
        times = np.array([k.time for k in cfg.keyframes])
        spline = CubicSpline(times, np.array([k.translation for k in cfg.keyframes]), bc_type='natural')
        slerp = Slerp(times, Rotation.from_rotvec(np.array([k.rotvec for k in cfg.keyframes])))
        clamped = np.clip(t, times[0], times[-1])
        translations = spline(clamped)
        rotations = slerp(clamped).as_matrix()
        acc = spline(clamped, 2)
        acc[(t < times[0]) | (t > times[-1])] = 0.0
    else:
        raise InvalidInput(f'unknown trajectory kind: {cfg.trajectory}')

    return PoseSequence.from_arrays(rotations, translations, tau), acc


# ---------------------------------------------------------------------------
# Masks
# ---------------------------------------------------------------------------

def boundary_band(mask: np.ndarray, width: int) -> np.ndarray:
    """Pixels within ``width`` of the silhouette boundary (inside or outside)."""
    if width <= 0 or not mask.any():
        return np.zeros_like(mask, dtype=bool)
    dilated = ndimage.binary_dilation(mask, iterations=width)
    eroded = ndimage.binary_erosion(mask, iterations=width)
    return dilated & ~eroded


def noisy_mask(mask: SilhouetteMask, band_px: int, flip_prob: float, rng: np.random.Generator) -> SilhouetteMask:
    binary = mask.binary()
    band = boundary_band(binary, band_px)
    flips = band & (rng.random(binary.shape) < flip_prob)
    return SilhouetteMask((binary ^ flips).astype(np.float64))


def render_masks(mesh: TriMesh, trajectory: PoseSequence, camera: Camera, cfg: SceneSection,
                 seed: int, threads: int = 1) -> List[SilhouetteMask]:
    occluded = np.zeros(len(trajectory), dtype=bool)
    for start, end in cfg.occlusion_windows:
        occluded[start:end] = True

    def one_frame(index: int) -> SilhouetteMask:
        if occluded[index]:
            return SilhouetteMask.blank(camera.height, camera.width)
        mask = hard_silhouette(mesh, trajectory.frames[index], camera)
        if cfg.noise.mask_band_px > 0 and cfg.noise.mask_flip_prob > 0:
            rng = np.random.default_rng([seed, index])
            mask = noisy_mask(mask, cfg.noise.mask_band_px, cfg.noise.mask_flip_prob, rng)
        return mask

    return ordered_map(one_frame, range(len(trajectory)), threads)


# ---------------------------------------------------------------------------
# Human motion
# ---------------------------------------------------------------------------

def scripted_body_rotations(skel: SkeletonModel, t: float) -> np.ndarray:
    """Local joint rotations of a gentle walk-in-place with finger curl at time t."""
    rotations = np.tile(np.eye(3), (skel.joint_count, 1, 1))
    gait = 2.0 * np.pi * 0.8 * t

    def rx(angle: float) -> np.ndarray:
        return Rotation.from_euler('x', angle).as_matrix()

    rotations[1] = rx(0.3 * np.sin(gait))
    rotations[2] = rx(-0.3 * np.sin(gait))
    rotations[4] = rx(-0.2 * (1.0 - np.cos(gait)))
    rotations[5] = rx(-0.2 * (1.0 + np.cos(gait)))
    if skel.joint_count >= BODY_JOINTS:
        rotations[3] = Rotation.from_euler('y', 0.05 * np.sin(gait)).as_matrix()
        rotations[16] = Rotation.from_euler('y', 0.9 + 0.1 * np.sin(gait)).as_matrix()
        rotations[18] = Rotation.from_euler('z', 0.2 * np.sin(gait)).as_matrix()
        rotations[17] = Rotation.from_euler('y', -0.6).as_matrix()
        rotations[19] = Rotation.from_euler('z', -0.5).as_matrix()
    curl = 0.35 + 0.2 * np.sin(2.0 * np.pi * 0.5 * t)
    for j in range(BODY_JOINTS, skel.joint_count):
        side = 1.0 if j < BODY_JOINTS + 15 else -1.0
        rotations[j] = Rotation.from_euler('y', side * curl).as_matrix()
    return rotations


def synthesize_motion(skel: SkeletonModel, trajectory: PoseSequence, joint: int, scale: float,
                      attachment: RigidPose = DEFAULT_ATTACHMENT) -> SkeletonMotion:
    """Scripted body motion moved rigidly so ``joint`` holds the object every frame."""
    if not 0 <= joint < skel.joint_count:
        raise InvalidInput(f'attach joint {joint} outside skeleton with {skel.joint_count} joints')
    roots, rotations = [], []
    for k, pose in enumerate(trajectory.frames):
        local = scripted_body_rotations(skel, k * trajectory.frame_interval)
        root, local = attach_to_object(np.zeros(3), local, skel, pose, attachment, joint, scale)
        roots.append(root)
        rotations.append(local)
    return SkeletonMotion(np.array(roots), np.array(rotations), trajectory.frame_interval, scale)


# ---------------------------------------------------------------------------
# Sync stream
# ---------------------------------------------------------------------------

def simulate_jump_stream(count: int, rate: float, seed: int, noise: float = 0.0,
                         takeoff_fraction: float = 0.3, airtime: float = 0.3,
                         gravity: np.ndarray = GRAVITY) -> Tuple[ImuStream, int]:
    """
    Ankle IMU: rest, push-off, free fall, landing impact, rest.

    Returns the stream and the landing sample index.
    """
    rng = np.random.default_rng([seed, 7])
    tilt = Rotation.from_rotvec(rng.normal(0.0, 0.1, size=3)).as_matrix()
    rotations = np.tile(tilt, (count, 1, 1))
    air = max(2, int(round(airtime * rate)))
    takeoff = int(round(takeoff_fraction * count))
    landing = takeoff + air
    if takeoff < 4 or landing + 4 > count:
        raise InvalidInput(f'jump stream of {count} samples is too short for {air} airborne samples')

    g = np.linalg.norm(gravity)
    free = np.zeros((count, 3))
    free[takeoff - 3:takeoff, 2] = 0.5 * g
    free[takeoff:landing, 2] = -g
    for k, factor in enumerate((3.0, 1.5, 0.5)):
        free[landing + k, 2] = factor * g
    raw = np.einsum('ji,tj->ti', tilt, free + gravity)
    if noise > 0:
        raw = raw + rng.normal(0.0, noise, size=raw.shape)
    stream = ImuStream.from_arrays(np.arange(count) / rate, rotations, raw, rate)
    return stream, landing


# ---------------------------------------------------------------------------
# Scene
# ---------------------------------------------------------------------------

def make_camera(cfg: SceneSection) -> Camera:
    cam = cfg.camera
    return Camera.look_at(cam.eye, cam.target, cam.width, cam.height, cam.focal)


@log_performance(logger)
def generate_scene(cfg: SceneSection, seed: int = 0, threads: int = 1, render: bool = True) -> Scene:
    """Trajectory, masks, IMU and human motion for one synthetic capture; ``render=False`` skips masks."""
    mesh = TriMesh.from_spec(cfg.mesh)
    camera = make_camera(cfg)
    trajectory, exact_acc = synthesize_trajectory(cfg)
    logger.info(f'Synthesizing {cfg.trajectory} scene: {len(trajectory)} frames at {cfg.fps} fps, '
                f'{len(mesh.faces)} faces, {camera.width}x{camera.height} px')

    masks = render_masks(mesh, trajectory, camera, cfg, seed, threads) if render else []

    imu_to_world = axis_angle_to_matrix(cfg.imu_to_world_rotvec)
    noise = ImuNoise(cfg.noise.imu_rotation_deg, cfg.noise.imu_acceleration)
    imu = simulate_imu(trajectory, smoothing=cfg.imu_smoothing, noise=noise, seed=seed,
                       free_acc=exact_acc if cfg.exact_acceleration else None,
                       imu_to_world=imu_to_world)

    skel = default_skeleton(cfg.skeleton)
    motion = synthesize_motion(skel, trajectory, cfg.attach_joint, cfg.body_scale)

    sync_stream, sync_index = None, None
    if cfg.sync_stream:
        sync_stream, sync_index = simulate_jump_stream(len(trajectory), cfg.fps, seed, cfg.noise.imu_acceleration)
        logger.info(f'Ankle sync stream: landing at sample {sync_index}')

    return Scene(mesh=mesh, camera=camera, trajectory=trajectory, free_acceleration=exact_acc, imu=imu,
                 masks=tuple(masks), skeleton=skel, motion=motion, imu_to_world=imu_to_world,
                 sync_stream=sync_stream, sync_index=sync_index)


def jitter_scene(cfg: SceneSection, seed: int, amount: float = 0.2) -> SceneSection:
    """Scene variant with rates, radius and centre perturbed; used to diversify filter training data."""
    rng = np.random.default_rng([seed, 11])

    def factor() -> float:
        return float(1.0 + rng.uniform(-amount, amount))

    center = np.asarray(cfg.center) + rng.uniform(-0.5 * amount, 0.5 * amount, size=3) * np.array([1.0, 1.0, 0.5])
    return cfg.model_copy(update={
        'radius': cfg.radius * factor(),
        'angular_rate': cfg.angular_rate * factor(),
        'spin_rates': [r * factor() for r in cfg.spin_rates],
        'bob_amplitude': cfg.bob_amplitude * factor(),
        'center': center.tolist(),
    })
