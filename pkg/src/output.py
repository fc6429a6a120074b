import csv
import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from .errors import InvalidInput, MissingArtifact
from .evaluation import EvalReport
from .geometry import PoseSequence, TriMesh
from .imu import CalibrationResult, ImuStream, SyncEvent
from .logging_config import get_logger
from .render import Camera, SilhouetteMask
from .skeleton import SkeletonModel, SkeletonMotion
from .utils import safe_json_dump, safe_json_load

logger = get_logger(__name__)

TRAJECTORY_FILE = 'trajectory.json'
IMU_FILE = 'imu.csv'
SYNC_IMU_FILE = 'sync_imu.csv'
MASK_DIR = 'masks'
SKELETON_FILE = 'skeleton.json'
CAMERA_FILE = 'camera.json'
MESH_FILE = 'mesh.obj'
SCENE_FILE = 'scene.json'
CALIBRATION_FILE = 'calibration.json'
SYNC_FILE = 'sync.json'
TRACK_DIR = 'track'
FILTER_FILE = 'filter/denoiser.bin'
REFINE_DIR = 'refine'
EVAL_DIR = 'eval'
RENDER_DIR = 'render'


def trajectory_to_dict(trajectory: PoseSequence) -> Dict[str, Any]:
    return {
        'frame_interval': trajectory.frame_interval,
        'frames': [{'rotation': f.rotation.reshape(-1).tolist(), 'translation': f.translation.tolist()}
                   for f in trajectory.frames],
    }


def trajectory_from_dict(data: Dict[str, Any]) -> PoseSequence:
    frames = data['frames']
    rotations = np.array([f['rotation'] for f in frames], dtype=np.float64).reshape(-1, 3, 3)
    translations = np.array([f['translation'] for f in frames], dtype=np.float64)
    return PoseSequence.from_arrays(rotations, translations, float(data['frame_interval']))


class OutputManager:
    """Reads and writes every stage artifact inside one output directory"""

    def __init__(self, output_dir: Union[str, Path]):
        self.root = Path(output_dir)

    def path(self, relative: Union[str, Path]) -> Path:
        """Resolve a path inside the output directory"""
        target = (self.root / relative).resolve()
        if self.root.resolve() not in target.parents and target != self.root.resolve():
            raise InvalidInput(f'{relative} points outside the output directory {self.root}')
        return target

    def require(self, relative: Union[str, Path], hint: str = '') -> Path:
        target = self.path(relative)
        if not target.exists():
            raise MissingArtifact(target, hint)
        return target

    def exists(self, relative: Union[str, Path]) -> bool:
        return self.path(relative).exists()

    def _write_json(self, relative: Union[str, Path], data: Any) -> Path:
        target = self.path(relative)
        if not safe_json_dump(data, target):
            raise OSError(f'could not write {target}')
        logger.info(f'Saved {target}')
        return target

    def _read_json(self, relative: Union[str, Path], hint: str = '') -> Any:
        target = self.require(relative, hint)
        data = safe_json_load(target)
        if data is None:
            raise InvalidInput(f'{target} is not valid JSON')
        return data

    # Configuration and diagnostics

    def write_resolved_config(self, stage: str, config: Dict[str, Any]) -> Path:
        return self._write_json(f'resolved_{stage}.json', config)

    def write_diagnostics(self, relative: Union[str, Path], diagnostics: Dict[str, Any]) -> Path:
        return self._write_json(relative, diagnostics)

    # Trajectories and human motion

    def save_trajectory(self, trajectory: PoseSequence, relative: Union[str, Path] = TRAJECTORY_FILE) -> Path:
        return self._write_json(relative, trajectory_to_dict(trajectory))

    def load_trajectory(self, relative: Union[str, Path] = TRAJECTORY_FILE, hint: str = 'run simulate first') -> PoseSequence:
        return trajectory_from_dict(self._read_json(relative, hint))

    def save_motion(self, skeleton: SkeletonModel, motion: SkeletonMotion,
                    relative: Union[str, Path] = SKELETON_FILE) -> Path:
        return self._write_json(relative, {**skeleton.to_dict(), 'motion': motion.to_dict()})

    def load_motion(self, relative: Union[str, Path] = SKELETON_FILE,
                    hint: str = 'run simulate first') -> Tuple[SkeletonModel, SkeletonMotion]:
        data = self._read_json(relative, hint)
        return SkeletonModel.from_dict(data), SkeletonMotion.from_dict(data['motion'])

    # Sensors

    def save_imu(self, stream: ImuStream, relative: Union[str, Path] = IMU_FILE) -> Path:
        target = self.path(relative)
        target.parent.mkdir(parents=True, exist_ok=True)
        stream.save_csv(target)
        logger.info(f'Saved {len(stream)} IMU samples to {target}')
        return target

    def load_imu(self, relative: Union[str, Path] = IMU_FILE, rate: Optional[float] = None,
                 hint: str = 'run simulate first') -> ImuStream:
        return ImuStream.load_csv(self.require(relative, hint), rate)

    def save_masks(self, masks: Sequence[SilhouetteMask]) -> Path:
        directory = self.path(MASK_DIR)
        directory.mkdir(parents=True, exist_ok=True)
        for stale in directory.glob('*.png'):
            stale.unlink()
        for k, mask in enumerate(masks):
            mask.save_png(directory / f'{k:06d}.png')
        logger.info(f'Saved {len(masks)} masks to {directory}')
        return directory

    def load_masks(self) -> List[SilhouetteMask]:
        directory = self.require(MASK_DIR, 'run simulate first')
        files = sorted(directory.glob('*.png'))
        if not files:
            raise MissingArtifact(directory, 'mask directory is empty')
        return [SilhouetteMask.load_png(f) for f in files]

    def save_camera(self, camera: Camera) -> Path:
        return self._write_json(CAMERA_FILE, camera.to_dict())

    def load_camera(self) -> Camera:
        return Camera.from_dict(self._read_json(CAMERA_FILE, 'run simulate first'))

    def save_mesh(self, mesh: TriMesh) -> Path:
        target = self.path(MESH_FILE)
        target.parent.mkdir(parents=True, exist_ok=True)
        mesh.save_obj(target)
        return target

    def load_mesh(self) -> TriMesh:
        return TriMesh.load_obj(self.require(MESH_FILE, 'run simulate first'))

    def save_scene_info(self, info: Dict[str, Any]) -> Path:
        return self._write_json(SCENE_FILE, info)

    def load_scene_info(self) -> Dict[str, Any]:
        return self._read_json(SCENE_FILE, 'run simulate first')

    def save_calibration(self, result: CalibrationResult) -> Path:
        return self._write_json(CALIBRATION_FILE, result.to_dict())

    def load_calibration(self) -> Optional[CalibrationResult]:
        if not self.exists(CALIBRATION_FILE):
            return None
        return CalibrationResult.from_dict(self._read_json(CALIBRATION_FILE))

    def save_sync(self, event: SyncEvent) -> Path:
        return self._write_json(SYNC_FILE, {'index': event.index, 'timestamp': event.timestamp,
                                            'confident': event.confident})

    # Evaluation and figures

    def save_report(self, report: EvalReport) -> Path:
        directory = self.path(EVAL_DIR)
        self._write_json(f'{EVAL_DIR}/report.json', report.to_dict())
        with open(directory / 'report.txt', 'w', encoding='utf-8') as f:
            f.write(report.format_text())

        csv_file = directory / 'per_frame.csv'
        with open(csv_file, 'w', newline='', encoding='utf-8') as f:
            writer = csv.DictWriter(f, fieldnames=['frame', 'human_cd', 'object_cd'])
            writer.writeheader()
            writer.writerows(report.breakdown)
        logger.info(f'Evaluation report saved to {directory}')
        return directory

    def load_report(self) -> Dict[str, Any]:
        return self._read_json(f'{EVAL_DIR}/report.json', 'run eval first')

    def save_overlay(self, image: np.ndarray, index: int) -> Path:
        target = self.path(f'{RENDER_DIR}/overlay_{index:06d}.png')
        target.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.asarray(image, dtype=np.uint8)).save(target)
        return target


def load_json_file(path: Union[str, Path], hint: str = '') -> Any:
    """Read a JSON artifact given by an explicit path (CLI file arguments)."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(path, hint)
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)
