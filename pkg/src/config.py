"""
Pipeline configuration: pydantic sections loaded from TOML, overridden by
environment variables and CLI flags, validated in one place.
"""

import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigValidationError
from .logging_config import get_logger

# Load environment variables
load_dotenv()

logger = get_logger(__name__)


class Section(BaseModel):
    model_config = ConfigDict(extra='forbid', validate_assignment=True)


class CameraSection(Section):
    width: int = Field(64, ge=8, description='Image width in pixels')
    height: int = Field(64, ge=8, description='Image height in pixels')
    focal: float = Field(80.0, gt=0, description='Focal length in pixels (fx = fy)')
    eye: List[float] = Field([0.0, -1.5, 1.0], min_length=3, max_length=3, description='Camera centre (m)')
    target: List[float] = Field([0.0, 0.0, 1.0], min_length=3, max_length=3, description='Point the camera faces (m)')


class NoiseSection(Section):
    mask_band_px: int = Field(0, ge=0, description='Width of the mask boundary band where pixels may flip')
    mask_flip_prob: float = Field(0.3, ge=0, le=1, description='Flip probability inside the boundary band')
    imu_rotation_deg: float = Field(0.0, ge=0, description='Std of IMU rotation noise (degrees)')
    imu_acceleration: float = Field(0.0, ge=0, description='Std of accelerometer noise (m/s^2)')


class Keyframe(Section):
    time: float = Field(ge=0)
    translation: List[float] = Field(min_length=3, max_length=3)
    rotvec: List[float] = Field([0.0, 0.0, 0.0], min_length=3, max_length=3)


class SceneSection(Section):
    mesh: str = Field('builtin:box:0.2', description='OBJ path or builtin:box[:size] / builtin:sphere[:r[:rings[:segments]]]')
    trajectory: Literal['static', 'linear', 'circular', 'tumbling', 'keyframes'] = Field(
        'circular', description='Object trajectory kind')
    duration: float = Field(2.0, gt=0, description='Sequence length in seconds')
    fps: float = Field(30.0, gt=0, description='Camera frame rate')
    center: List[float] = Field([0.0, 0.0, 1.0], min_length=3, max_length=3, description='Trajectory centre (m)')
    radius: float = Field(0.3, ge=0, description='Circular trajectory radius (m)')
    angular_rate: float = Field(1.5, description='Circular angular rate (rad/s)')
    velocity: List[float] = Field([0.2, 0.0, 0.0], min_length=3, max_length=3, description='Linear initial velocity (m/s)')
    acceleration: List[float] = Field([0.0, 0.0, 0.0], min_length=3, max_length=3, description='Linear acceleration (m/s^2)')
    spin_rates: List[float] = Field([1.2, 0.7], min_length=2, max_length=2, description='Tumbling spin rates about two axes (rad/s)')
    bob_amplitude: float = Field(0.05, ge=0, description='Tumbling vertical bob amplitude (m)')
    bob_frequency: float = Field(1.0, ge=0, description='Tumbling bob frequency (Hz)')
    keyframes: List[Keyframe] = Field(default_factory=list, description='Scripted keyframes (time, translation, rotvec)')
    occlusion_windows: List[Tuple[int, int]] = Field(default_factory=list,
                                                     description='Frame ranges [start, end) with blank masks')
    imu_smoothing: int = Field(4, ge=1, description='Second-difference half width n for simulated IMU')
    exact_acceleration: bool = Field(True, description='Use analytic acceleration when the trajectory admits it')
    imu_to_world_rotvec: List[float] = Field([0.0, 0.0, 0.0], min_length=3, max_length=3,
                                             description='Inertial-to-world rotation as axis-angle (rad)')
    sync_stream: bool = Field(False, description='Also simulate an ankle IMU with a jump for temporal sync')
    skeleton: Optional[str] = Field(None, description='Skeleton JSON (default: shipped 52-joint tree)')
    attach_joint: int = Field(21, ge=0, description='Joint the object is rigidly attached to')
    body_scale: float = Field(1.0, gt=0, description='Uniform skeleton scale')
    camera: CameraSection = Field(default_factory=CameraSection)
    noise: NoiseSection = Field(default_factory=NoiseSection)

    @property
    def frame_count(self) -> int:
        return int(round(self.duration * self.fps))

    @model_validator(mode='after')
    def _check_windows(self) -> 'SceneSection':
        frames = self.frame_count
        for start, end in self.occlusion_windows:
            if not 0 <= start < end <= frames:
                raise ValueError(f'occlusion window [{start}, {end}) is outside 0..{frames} frames')
        if self.trajectory == 'keyframes':
            if len(self.keyframes) < 2:
                raise ValueError('keyframes trajectory needs at least 2 keyframes')
            times = [k.time for k in self.keyframes]
            if any(b <= a for a, b in zip(times, times[1:])):
                raise ValueError('keyframe times must be strictly increasing')
        return self


class CalibrationSection(Section):
    stride: int = Field(5, ge=1, description='Frame stride s between rotation pairs')


class SyncSection(Section):
    free_fall_ratio: float = Field(0.15, gt=0, lt=1, description='Free fall when |a_raw| < ratio * g')


class TrackingSection(Section):
    sigma: float = Field(1.0, gt=0, description='Soft rasterizer sharpness (pixels)')
    w_visual: float = Field(20.0, ge=0, description='Weight of the silhouette energy')
    w_imu: float = Field(1e5, ge=0, description='Weight of the IMU energy')
    lr: Optional[float] = Field(None, gt=0, description='Learning rate (default 0.01 at <= 30 fps, 5e-4 above)')
    iterations: int = Field(300, ge=0, description='Joint optimization iterations')
    feedback_iterations: int = Field(3, ge=0, le=3, description='Per-frame feedback iterations N_F')
    feedback_samples: int = Field(400, ge=1, description='Surface samples N_S per feedback iteration')
    area_weight: float = Field(0.2, ge=0, description='Area loss weight in feedback refinement')
    mode: Literal['physical', 'literal'] = Field('physical', description='Acceleration units in the IMU energy')
    skip_empty_masks: bool = Field(True, description='Treat blank masks as unobserved')
    init_rotation_noise_deg: float = Field(5.0, ge=0, description='Perturbation of the initial rotations (deg)')
    init_translation_noise: float = Field(0.05, ge=0, description='Perturbation of the initial translations (m)')
    face_chunk: int = Field(64, ge=1, description='Faces rasterized per chunk')

    def effective_lr(self, fps: float) -> float:
        if self.lr is not None:
            return self.lr
        return 0.01 if fps <= 30.0 else 5e-4


class DiffusionSection(Section):
    steps: int = Field(1000, ge=1, description='Diffusion steps N')
    schedule: Literal['linear', 'cosine'] = Field('linear', description='Noise schedule family')
    beta_start: float = Field(1e-4, gt=0, lt=1)
    beta_end: float = Field(2e-2, gt=0, lt=1)
    window: int = Field(16, ge=2, description='Frames per filter window W')
    window_stride: int = Field(8, ge=1, description='Stride between training windows')
    hidden: int = Field(256, ge=1, description='Hidden width of the reference MLP')
    layers: int = Field(3, ge=1, description='Hidden layers of the reference MLP')
    epochs: int = Field(200, ge=0)
    batch_size: int = Field(16, ge=1)
    lr: float = Field(1e-3, gt=0)
    lambda_off: float = Field(1.0, ge=0)
    lambda_vel: float = Field(1.0, ge=0)
    lambda_consist: float = Field(1.0, ge=0)
    lambda_imu: float = Field(100.0, ge=0)
    simple_only_epochs: int = Field(0, ge=0, description='Warm-up epochs with L_simple only')
    regularizer_warmup_epochs: int = Field(35, ge=0, description='Epochs with L_off and L_vel before the rest')
    ema_every: int = Field(10, ge=1)
    ema_decay: float = Field(0.995, gt=0, lt=1)
    start_level: int = Field(100, ge=1, description='Noise level n0 refinement starts from')
    mode: Literal['physical', 'literal'] = Field('physical')
    train_scenes: int = Field(4, ge=1, description='Simulated captures used by train-filter')
    category: str = Field('default', description='Category tag of the trained filter')
    infill_hands: bool = Field(True, description='Mask hand slices of the condition and generate hands during refine')
    use_ema: bool = Field(False, description='Refine with the EMA copy instead of the online weights')

    @model_validator(mode='after')
    def _check_schedule(self) -> 'DiffusionSection':
        if self.beta_end < self.beta_start:
            raise ValueError('beta_end must be >= beta_start')
        if self.start_level > self.steps:
            raise ValueError(f'start_level {self.start_level} exceeds steps {self.steps}')
        return self


class EvaluationSection(Section):
    window_seconds: float = Field(10.0, gt=0, description='Sliding window length for windowed CD')
    with_scale: bool = Field(True, description='Allow scale in the holistic Procrustes alignment')
    object_samples: int = Field(500, ge=1, description='Object surface samples per frame')
    human_radius: float = Field(0.02, gt=0, description='Sphere radius around each joint (m)')
    human_samples_per_joint: int = Field(8, ge=0)
    clip_short_sequences: bool = Field(False,
                                       description='Evaluate a sequence shorter than window_seconds as one window')
    prediction: Literal['auto', 'track', 'refine'] = Field(
        'auto', description='Stage whose output is evaluated (auto: refine when present, else track)')


class RenderSection(Section):
    sigma: float = Field(1.0, gt=0)
    every: int = Field(1, ge=1, description='Render every k-th frame')
    prediction: Literal['auto', 'track', 'refine'] = Field('auto', description='Stage whose poses are rendered')


class PipelineConfig(Section):
    seed: int = Field(0, ge=0, description='Global seed')
    output_dir: str = Field('output', description='Directory for stage artifacts')
    scene: SceneSection = Field(default_factory=SceneSection)
    calibration: CalibrationSection = Field(default_factory=CalibrationSection)
    sync: SyncSection = Field(default_factory=SyncSection)
    tracking: TrackingSection = Field(default_factory=TrackingSection)
    diffusion: DiffusionSection = Field(default_factory=DiffusionSection)
    evaluation: EvaluationSection = Field(default_factory=EvaluationSection)
    render: RenderSection = Field(default_factory=RenderSection)

    def warnings(self) -> List[str]:
        """Soft issues worth logging but not fatal."""
        warnings = []
        if self.tracking.w_imu == 0:
            warnings.append('tracking.w_imu is 0; occluded frames will receive no motion constraint')
        if self.tracking.sigma < 0.25:
            warnings.append(f'very sharp rasterizer (sigma={self.tracking.sigma}) gives sparse gradients')
        if self.scene.frame_count <= 2 * self.scene.imu_smoothing:
            warnings.append('scene is too short for the IMU smoothing width')
        if self.diffusion.window > self.scene.frame_count:
            warnings.append(f'diffusion.window {self.diffusion.window} exceeds the scene length')
        if self.scene.trajectory == 'static' and self.tracking.w_visual == 0:
            warnings.append('static scene with w_visual = 0 has no signal to track')
        return warnings


def format_validation_error(error: ValidationError) -> List[str]:
    problems = []
    for item in error.errors():
        location = '.'.join(str(p) for p in item['loc']) or '<root>'
        message = item['msg'].removeprefix('Value error, ')
        problems.append(f'{location}: {message}')
    return problems


def _deep_update(base: Dict[str, Any], updates: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in updates.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_update(merged[key], value)
        else:
            merged[key] = value
    return merged


def dotted_to_nested(overrides: Dict[str, Any]) -> Dict[str, Any]:
    """{'tracking.lr': 0.1} -> {'tracking': {'lr': 0.1}}"""
    nested: Dict[str, Any] = {}
    for dotted, value in overrides.items():
        node = nested
        *parents, leaf = dotted.split('.')
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return nested


def env_overrides() -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    seed = os.getenv('IMHOI_SEED')
    if seed:
        try:
            overrides['seed'] = int(seed)
        except ValueError:
            raise ConfigValidationError(
                f'Configuration validation failed:\n- IMHOI_SEED: expected an integer, got {seed!r}',
                [f'IMHOI_SEED: expected an integer, got {seed!r}'],
            ) from None
    return overrides


def build_config(data: Dict[str, Any]) -> PipelineConfig:
    """Validate a raw mapping, collecting every problem into one ConfigValidationError."""
    try:
        cfg = PipelineConfig.model_validate(data)
    except ValidationError as e:
        problems = format_validation_error(e)
        error_message = 'Configuration validation failed:\n' + '\n'.join(f'- {p}' for p in problems)
        raise ConfigValidationError(error_message, problems) from None
    for warning in cfg.warnings():
        logger.warning(f'Configuration warning: {warning}')
    return cfg


def load_pipeline_config(path: Optional[Union[str, Path]] = None,
                         overrides: Optional[Dict[str, Any]] = None) -> PipelineConfig:
    """
    Load TOML (if given), apply IMHOI_SEED and dotted CLI overrides, validate.

    Raises:
        ConfigValidationError: unreadable file or any invalid field
    """
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, 'rb') as f:
                data = tomllib.load(f)
        except FileNotFoundError:
            raise ConfigValidationError(f'Configuration validation failed:\n- config file not found: {path}',
                                        [f'config file not found: {path}']) from None
        except tomllib.TOMLDecodeError as e:
            raise ConfigValidationError(f'Configuration validation failed:\n- invalid TOML in {path}: {e}',
                                        [f'invalid TOML: {e}']) from None
        logger.debug(f'Loaded configuration file {path}')
    data = _deep_update(data, env_overrides())
    if overrides:
        data = _deep_update(data, dotted_to_nested(overrides))
    return build_config(data)


def logging_settings() -> Dict[str, Any]:
    """Logging options from the environment (LOG_LEVEL, LOG_JSON, LOG_COLORS, LOG_FILE)."""
    log_file = os.getenv('LOG_FILE') or None
    return {
        'log_level': os.getenv('LOG_LEVEL', 'INFO'),
        'enable_json': os.getenv('LOG_JSON', 'false').lower() == 'true',
        'enable_colors': os.getenv('LOG_COLORS', 'true').lower() == 'true',
        'log_file': log_file,
        'enable_file': log_file is not None,
    }


def default_threads() -> int:
    value = os.getenv('IMHOI_THREADS')
    if value and value.isdigit() and int(value) > 0:
        return int(value)
    return max(1, min(8, os.cpu_count() or 1))
