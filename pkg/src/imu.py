"""
IMU stream model and processing: free acceleration, lever-arm normalization,
temporal sync detection, hand-eye spatial calibration and synthetic IMU
simulation from object trajectories.

Sensor rotations are stored as matrices; the 6D form only appears at the
serialization boundary of downstream modules.
"""

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DegenerateMotion, InvalidInput, MissingAngularVelocity, ShapeMismatch, TooShort
from .geometry import PoseSequence, geodesic_angle, is_rotation, project_to_so3
from .logging_config import get_logger

logger = get_logger(__name__)

GRAVITY = np.array([0.0, 0.0, 9.81])
FREE_FALL_RATIO = 0.15

_ROTATION_COLUMNS = [f'r{i}{j}' for i in range(3) for j in range(3)]
_CSV_HEADER = ['t'] + _ROTATION_COLUMNS + ['ax', 'ay', 'az', 'wx', 'wy', 'wz']


@dataclass(frozen=True)
class ImuSample:
    """One IMU reading: sensor-to-inertial rotation R_s, raw specific force, optional ω."""
    timestamp: float
    rotation: np.ndarray
    acceleration_raw: np.ndarray
    angular_velocity: Optional[np.ndarray] = None

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        acc = np.asarray(self.acceleration_raw, dtype=np.float64).reshape(3)
        if not is_rotation(rotation, tol=1e-6):
            raise InvalidInput(f'IMU sample at t={self.timestamp} has an invalid rotation')
        if not np.all(np.isfinite(acc)):
            raise InvalidInput(f'IMU sample at t={self.timestamp} has non-finite acceleration')
        object.__setattr__(self, 'rotation', rotation)
        object.__setattr__(self, 'acceleration_raw', acc)
        if self.angular_velocity is not None:
            omega = np.asarray(self.angular_velocity, dtype=np.float64).reshape(3)
            if not np.all(np.isfinite(omega)):
                raise InvalidInput(f'IMU sample at t={self.timestamp} has non-finite angular velocity')
            object.__setattr__(self, 'angular_velocity', omega)


@dataclass(frozen=True)
class ImuStream:
    """Time-ordered IMU samples at ``rate`` Hz."""
    samples: Tuple[ImuSample, ...]
    rate: float

    def __post_init__(self):
        samples = tuple(self.samples)
        if not self.rate > 0:
            raise InvalidInput(f'IMU rate must be positive, got {self.rate}')
        stamps = np.array([s.timestamp for s in samples])
        if len(stamps) > 1 and np.any(np.diff(stamps) <= 0):
            raise InvalidInput('IMU timestamps must be strictly increasing')
        object.__setattr__(self, 'samples', samples)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def dt(self) -> float:
        return 1.0 / self.rate

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([s.timestamp for s in self.samples])

    @property
    def rotations(self) -> np.ndarray:
        return np.stack([s.rotation for s in self.samples])

    @property
    def raw_accelerations(self) -> np.ndarray:
        return np.stack([s.acceleration_raw for s in self.samples])

    @property
    def has_angular_velocity(self) -> bool:
        return all(s.angular_velocity is not None for s in self.samples)

    @property
    def angular_velocities(self) -> np.ndarray:
        if not self.has_angular_velocity:
            raise MissingAngularVelocity('IMU stream has samples without angular velocity')
        return np.stack([s.angular_velocity for s in self.samples])

    def free_accelerations(self, gravity: np.ndarray = GRAVITY) -> np.ndarray:
        return np.einsum('tij,tj->ti', self.rotations, self.raw_accelerations) - np.asarray(gravity)

    def shift(self, frames: int) -> 'ImuStream':
        """Drop the first ``frames`` samples (apply a sync offset)."""
        if frames < 0 or frames >= len(self.samples):
            raise InvalidInput(f'cannot shift a {len(self.samples)}-sample stream by {frames}')
        return replace(self, samples=self.samples[frames:])

    @classmethod
    def from_arrays(cls, timestamps: np.ndarray, rotations: np.ndarray, raw_accelerations: np.ndarray,
                    rate: float, angular_velocities: Optional[np.ndarray] = None) -> 'ImuStream':
        samples = []
        for k, (t, r, a) in enumerate(zip(timestamps, rotations, raw_accelerations)):
            w = None if angular_velocities is None else angular_velocities[k]
            samples.append(ImuSample(float(t), r, a, w))
        return cls(tuple(samples), rate)

    def save_csv(self, path: Union[str, Path]) -> None:
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f)
            writer.writerow(_CSV_HEADER)
            for s in self.samples:
                omega = s.angular_velocity if s.angular_velocity is not None else [None] * 3
                writer.writerow([repr(float(s.timestamp))]
                                + [repr(float(v)) for v in s.rotation.reshape(-1)]
                                + [repr(float(v)) for v in s.acceleration_raw]
                                + ['' if v is None else repr(float(v)) for v in omega])

    @classmethod
    def load_csv(cls, path: Union[str, Path], rate: Optional[float] = None) -> 'ImuStream':
        """Read the IMU CSV; angular velocity columns may be absent or empty."""
        samples = []
        with open(path, 'r', newline='', encoding='utf-8') as f:
            for row in csv.DictReader(f):
                omega = None
                if row.get('wx') not in (None, ''):
                    omega = [float(row['wx']), float(row['wy']), float(row['wz'])]
                samples.append(ImuSample(
                    float(row['t']),
                    np.array([float(row[c]) for c in _ROTATION_COLUMNS]).reshape(3, 3),
                    [float(row['ax']), float(row['ay']), float(row['az'])],
                    omega,
                ))
        if rate is None:
            if len(samples) < 2:
                raise TooShort(f'cannot infer IMU rate from {len(samples)} samples in {path}')
            rate = 1.0 / float(np.median(np.diff([s.timestamp for s in samples])))
        return cls(tuple(samples), rate)


@dataclass(frozen=True)
class CalibrationResult:
    """Inertial-to-world rotation with its consistency residual (radians)."""
    transform: np.ndarray
    residual: float
    frame_offset: int = 0
    singular_values: Tuple[float, ...] = field(default=(), compare=False)

    def to_dict(self) -> dict:
        return {
            'transform': self.transform.reshape(-1).tolist(),
            'residual_rad': self.residual,
            'residual_deg': float(np.degrees(self.residual)),
            'frame_offset': self.frame_offset,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'CalibrationResult':
        return cls(np.array(data['transform'], dtype=np.float64).reshape(3, 3),
                   float(data['residual_rad']), int(data.get('frame_offset', 0)))


@dataclass(frozen=True)
class SyncEvent:
    index: int
    timestamp: float
    confident: bool


@dataclass(frozen=True)
class ImuNoise:
    rotation_deg: float = 0.0
    acceleration: float = 0.0


# ---------------------------------------------------------------------------
# Conversions
# ---------------------------------------------------------------------------

def free_acceleration(s: ImuSample, gravity: np.ndarray = GRAVITY) -> np.ndarray:
    """Global-frame acceleration with gravity removed: R_s·a_raw − g."""
    return s.rotation @ s.acceleration_raw - np.asarray(gravity, dtype=np.float64)


def apply_calibration(rotations: np.ndarray, free_acc: np.ndarray,
                      transform: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Express inertial-frame rotations and free accelerations in the world frame."""
    return np.einsum('ij,tjk->tik', transform, rotations), free_acc @ transform.T


def normalize_lever_arm(stream: ImuStream, offset: Sequence[float]) -> ImuStream:
    """
    Remove the linear acceleration a mounting offset ``r`` picks up from rotation.

    v_t = R_t (ω_t × r) in the global frame, δa_t = (v_t − v_{t−1})/Δt; the first
    sample reuses the second's backward difference. δa is subtracted from the
    global free acceleration (equivalently R_tᵀ·δa from the raw reading).
    """
    if len(stream) < 2:
        raise TooShort('lever-arm normalization needs at least 2 samples')
    omega = stream.angular_velocities
    r = np.asarray(offset, dtype=np.float64).reshape(3)
    rotations = stream.rotations
    v_global = np.einsum('tij,tj->ti', rotations, np.cross(omega, r))
    delta = np.empty_like(v_global)
    delta[1:] = np.diff(v_global, axis=0) / np.diff(stream.timestamps)[:, None]
    delta[0] = delta[1]
    corrected = stream.raw_accelerations - np.einsum('tji,tj->ti', rotations, delta)
    logger.debug(f'Lever-arm correction peak {np.abs(delta).max():.4f} m/s^2 for r={r.tolist()}')
    return ImuStream(tuple(replace(s, acceleration_raw=a) for s, a in zip(stream.samples, corrected)),
                     stream.rate)


def angular_velocity_from_rotations(rotations: np.ndarray, dt: float) -> np.ndarray:
    """Body-frame ω from consecutive rotations; the last sample repeats its predecessor."""
    rotations = np.asarray(rotations)
    if len(rotations) < 2:
        return np.zeros((len(rotations), 3))
    rel = np.einsum('tji,tjk->tik', rotations[:-1], rotations[1:])
    omega = Rotation.from_matrix(rel).as_rotvec() / dt
    return np.vstack([omega, omega[-1:]])


# ---------------------------------------------------------------------------
# Temporal synchronization
# ---------------------------------------------------------------------------

def _longest_run(flags: np.ndarray) -> Tuple[int, int]:
    """(start, stop) of the longest run of True values, (0, 0) if none."""
    best, start = (0, 0), None
    for i, flag in enumerate(np.append(flags, False)):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            if i - start > best[1] - best[0]:
                best = (start, i)
            start = None
    return best


def detect_sync_event(stream: ImuStream, gravity: np.ndarray = GRAVITY,
                      free_fall_ratio: float = FREE_FALL_RATIO) -> SyncEvent:
    """
    Find the landing after a take-off: the onset with the largest jerk.

    Jerk is the backward difference of free acceleration; only frames where the
    free-acceleration magnitude rises score. The search starts after the longest
    near-free-fall interval (‖a_raw‖ < free_fall_ratio·‖g‖); without such an interval the
    global maximum is returned and flagged low-confidence.
    """
    if len(stream) < 3:
        raise TooShort(f'sync detection needs at least 3 samples, got {len(stream)}')
    free = stream.free_accelerations(gravity)
    magnitude = np.linalg.norm(free, axis=1)
    jerk = np.zeros(len(stream))
    jerk[1:] = np.linalg.norm(np.diff(free, axis=0), axis=1) / stream.dt
    jerk[1:][np.diff(magnitude) <= 0] = 0.0

    falling = np.linalg.norm(stream.raw_accelerations, axis=1) < free_fall_ratio * np.linalg.norm(gravity)
    start, stop = _longest_run(falling)
    confident = stop > start and stop < len(stream)
    search_from = stop if confident else 0
    index = search_from + int(np.argmax(jerk[search_from:]))
    if not confident:
        logger.warning('No free-fall interval found; sync event is the global jerk maximum (low confidence)')
    else:
        logger.info(f'Free fall over samples [{start}, {stop}); landing at sample {index}')
    return SyncEvent(index=index, timestamp=float(stream.samples[index].timestamp), confident=bool(confident))


# ---------------------------------------------------------------------------
# Spatial calibration
# ---------------------------------------------------------------------------

def calibrate_spatial(world_rots: Sequence[np.ndarray], imu_rots: Sequence[np.ndarray],
                      stride: int = 5, frame_offset: int = 0) -> CalibrationResult:
    """
    Solve A_t·T + T·B_t = 0 for the inertial-to-world rotation T.

    A_t = −R_t^W (R_{t+s}^W)ᵀ, B_t = R_t^I (R_{t+s}^I)ᵀ. The stacked Kronecker
    system (I⊗A_t + B_tᵀ⊗I)·vec(T) = 0 is solved by the right singular vector of
    the smallest singular value, sign-fixed to a positive determinant and
    projected onto SO(3).

    Raises:
        TooShort: fewer than stride + 2 rotation pairs
        DegenerateMotion: null space wider than one dimension
    """
    world = np.asarray(world_rots, dtype=np.float64)
    inertial = np.asarray(imu_rots, dtype=np.float64)
    if len(world) != len(inertial):
        raise InvalidInput(f'rotation lists differ in length: {len(world)} vs {len(inertial)}')
    if stride < 1:
        raise InvalidInput(f'stride must be >= 1, got {stride}')
    if len(world) < stride + 2:
        raise TooShort(f'calibration needs at least stride + 2 = {stride + 2} frames, got {len(world)}')

    a = -np.einsum('tij,tkj->tik', world[:-stride], world[stride:])
    b = np.einsum('tij,tkj->tik', inertial[:-stride], inertial[stride:])
    eye = np.eye(3)
    blocks = [np.kron(eye, a_t) + np.kron(b_t.T, eye) for a_t, b_t in zip(a, b)]
    system = np.vstack(blocks)

    _, singular, vt = np.linalg.svd(system)
    logger.debug(f'Calibration singular values: {np.array2string(singular, precision=3)}')
    if singular[0] < 1e-9 or singular[-2] < 1e-6 * singular[0]:
        raise DegenerateMotion(
            'rotation excitation is insufficient to determine the calibration '
            f'(second-smallest singular value {singular[-2]:.3e} vs largest {singular[0]:.3e})'
        )

    solution = vt[-1].reshape(3, 3, order='F')
    if np.linalg.det(solution) < 0:
        solution = -solution
    transform = project_to_so3(solution)
    residual = calibration_residual(transform, a, b)
    logger.info(f'Calibrated inertial-to-world rotation, residual {np.degrees(residual):.6f} deg over {len(a)} pairs')
    return CalibrationResult(transform, residual, frame_offset, tuple(float(s) for s in singular))


def calibration_residual(transform: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    """Mean geodesic angle between T·B_t·Tᵀ and −A_t."""
    angles = [geodesic_angle(transform @ b_t @ transform.T, -a_t) for a_t, b_t in zip(a, b)]
    return float(np.mean(angles))


def relative_motion_pairs(world_rots: np.ndarray, imu_rots: np.ndarray, stride: int) -> Tuple[np.ndarray, np.ndarray]:
    """(A_t, B_t) pairs used by calibrate_spatial, exposed for residual checks."""
    world = np.asarray(world_rots)
    inertial = np.asarray(imu_rots)
    a = -np.einsum('tij,tkj->tik', world[:-stride], world[stride:])
    b = np.einsum('tij,tkj->tik', inertial[:-stride], inertial[stride:])
    return a, b


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

def second_difference(translations: np.ndarray, n: int, frame_interval: float) -> np.ndarray:
    """
    a_t = (T_{t−n} + T_{t+n} − 2·T_t)/(n·τ)²; the first/last n frames replicate
    the nearest interior value.
    """
    translations = np.asarray(translations, dtype=np.float64)
    count = len(translations)
    if count <= 2 * n:
        raise TooShort(f'second difference with n={n} needs more than {2 * n} frames, got {count}')
    acc = np.empty_like(translations)
    acc[n:count - n] = (translations[:count - 2 * n] + translations[2 * n:]
                        - 2.0 * translations[n:count - n]) / (n * frame_interval) ** 2
    acc[:n] = acc[n]
    acc[count - n:] = acc[count - n - 1]
    return acc


def raw_from_free(rotations: np.ndarray, free_acc: np.ndarray, gravity: np.ndarray = GRAVITY) -> np.ndarray:
    """Sensor-frame specific force that free_acceleration maps back to ``free_acc``."""
    return np.einsum('tji,tj->ti', rotations, free_acc + np.asarray(gravity))


def simulate_imu(traj: PoseSequence, smoothing: int = 4, noise: Optional[ImuNoise] = None,
                 seed: int = 0, free_acc: Optional[np.ndarray] = None,
                 imu_to_world: Optional[np.ndarray] = None,
                 gravity: np.ndarray = GRAVITY) -> ImuStream:
    """
    Synthesize an object-mounted IMU from a pose sequence.

    Accelerations come from the smoothed second difference of the translations
    unless ``free_acc`` supplies exact world-frame values. Rotations are copied
    from the trajectory (expressed in the inertial frame when ``imu_to_world``
    is given), optionally perturbed by random axis-angle noise; raw readings
    are computed from the noise-free rotations. Deterministic given ``seed``.
    """
    noise = noise or ImuNoise()
    rng = np.random.default_rng(seed)
    tau = traj.frame_interval
    count = len(traj)
    world_rotations = traj.rotations
    accel = second_difference(traj.translations, smoothing, tau) if free_acc is None else np.asarray(free_acc)
    if accel.shape != (count, 3):
        raise ShapeMismatch(f'free acceleration must be ({count}, 3), got {accel.shape}')
    to_inertial = np.eye(3) if imu_to_world is None else np.asarray(imu_to_world).T
    rotations = np.einsum('ij,tjk->tik', to_inertial, world_rotations)
    accel_inertial = accel @ to_inertial.T

    raw = raw_from_free(rotations, accel_inertial, gravity)
    if noise.acceleration > 0:
        raw = raw + rng.normal(0.0, noise.acceleration, size=raw.shape)
    omega = angular_velocity_from_rotations(rotations, tau)

    reported = rotations
    if noise.rotation_deg > 0:
        perturb = Rotation.from_rotvec(rng.normal(0.0, np.radians(noise.rotation_deg), size=(count, 3))).as_matrix()
        reported = np.einsum('tij,tjk->tik', rotations, perturb)

    timestamps = np.arange(count) * tau
    logger.debug(f'Simulated {count} IMU samples at {1.0 / tau:.1f} Hz (n={smoothing})')
    return ImuStream.from_arrays(timestamps, reported, raw, 1.0 / tau, omega)


def integrate_positions(accelerations: np.ndarray, p0: Sequence[float], v0: Sequence[float],
                        frame_interval: float) -> np.ndarray:
    """
    Discrete double integration matching the central second difference:
    p_1 = p_0 + v_0·τ + ½·a_0·τ², p_{t+1} = 2·p_t − p_{t−1} + a_t·τ².
    """
    acc = np.asarray(accelerations, dtype=np.float64)
    tau = frame_interval
    positions = np.empty_like(acc)
    positions[0] = np.asarray(p0, dtype=np.float64)
    if len(acc) > 1:
        positions[1] = positions[0] + np.asarray(v0) * tau + 0.5 * acc[0] * tau ** 2
    for t in range(1, len(acc) - 1):
        positions[t + 1] = 2.0 * positions[t] - positions[t - 1] + acc[t] * tau ** 2
    return positions
