"""
Soft silhouette rasterization of posed triangle meshes.

Per pixel p the occupancy is 1 − Π_j (1 − sigmoid(d_j(p)/σ)) where d_j is the
signed 2D distance to projected triangle j (positive inside). It is evaluated
in the equivalent form 1 − exp(−Σ_j softplus(d_j/σ)), batched over frames, in
torch float64 so the optimizers get gradients from autograd.

Camera convention: x right, y down, z forward; pixel (i, j) has its centre at
(u, v) = (j + 0.5, i + 0.5).
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import BehindCamera, InvalidInput, ShapeMismatch
from .geometry import RigidPose, TriMesh, matrix_to_rot6d, rot6d_to_matrix_torch
from .logging_config import get_logger

logger = get_logger(__name__)

DTYPE = torch.float64
MIN_DEPTH = 1e-6
CULL_MARGIN_SIGMAS = 30.0
DEFAULT_FACE_CHUNK = 64


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics K, world-to-camera extrinsics, image size."""
    intrinsics: np.ndarray
    extrinsics: RigidPose
    height: int
    width: int

    def __post_init__(self):
        k = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, 'intrinsics', k)
        if self.height < 1 or self.width < 1:
            raise InvalidInput(f'image size must be positive, got {self.height}x{self.width}')
        if not (k[0, 0] > 0 and k[1, 1] > 0):
            raise InvalidInput('focal lengths must be positive')
        if not (0 < k[0, 2] < self.width and 0 < k[1, 2] < self.height):
            raise InvalidInput(f'principal point ({k[0, 2]}, {k[1, 2]}) outside the {self.width}x{self.height} image')

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height, self.width

    @classmethod
    def from_focal(cls, width: int, height: int, focal: float,
                   extrinsics: Optional[RigidPose] = None) -> 'Camera':
        k = np.array([[focal, 0.0, width / 2.0], [0.0, focal, height / 2.0], [0.0, 0.0, 1.0]])
        return cls(k, extrinsics or RigidPose.identity(), height, width)

    @classmethod
    def look_at(cls, eye: Sequence[float], target: Sequence[float], width: int, height: int,
                focal: float, up: Sequence[float] = (0.0, 0.0, 1.0)) -> 'Camera':
        """Camera at ``eye`` facing ``target`` with world ``up`` mapped to image up."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            raise InvalidInput('look_at: viewing direction is parallel to the up vector')
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rotation = np.stack([right, down, forward])
        return cls.from_focal(width, height, focal, RigidPose(rotation, -rotation @ eye))

    def project(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """World points -> (pixel coordinates (N, 2), camera depth (N,))."""
        cam = self.extrinsics.apply(points)
        z = cam[:, 2]
        uv = np.stack([self.intrinsics[0, 0] * cam[:, 0] / z + self.intrinsics[0, 2],
                       self.intrinsics[1, 1] * cam[:, 1] / z + self.intrinsics[1, 2]], axis=1)
        return uv, z

    def to_dict(self) -> dict:
        return {
            'intrinsics': self.intrinsics.tolist(),
            'rotation': self.extrinsics.rotation.reshape(-1).tolist(),
            'translation': self.extrinsics.translation.tolist(),
            'height': self.height,
            'width': self.width,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'Camera':
        extrinsics = RigidPose(np.array(data['rotation']).reshape(3, 3), np.array(data['translation']))
        return cls(np.array(data['intrinsics']), extrinsics, int(data['height']), int(data['width']))

    def save(self, path: Union[str, Path]) -> None:
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'Camera':
        with open(path, 'r', encoding='utf-8') as f:
            return cls.from_dict(json.load(f))


@dataclass(frozen=True)
class SilhouetteMask:
    """h×w occupancy grid in [0, 1]."""
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise InvalidInput(f'mask must be 2D, got shape {values.shape}')
        if values.size and (values.min() < 0.0 or values.max() > 1.0):
            raise InvalidInput('mask values must lie in [0, 1]')
        object.__setattr__(self, 'values', values)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @property
    def area(self) -> float:
        return float(self.values.sum())

    def is_empty(self) -> bool:
        return not np.any(self.values > 0)

    def binary(self, threshold: float = 0.5) -> np.ndarray:
        return self.values >= threshold

    @classmethod
    def blank(cls, height: int, width: int) -> 'SilhouetteMask':
        return cls(np.zeros((height, width)))

    def save_png(self, path: Union[str, Path]) -> None:
        Image.fromarray(np.round(self.values * 255.0).astype(np.uint8)).save(path)

    @classmethod
    def load_png(cls, path: Union[str, Path]) -> 'SilhouetteMask':
        with Image.open(path) as img:
            return cls(np.asarray(img.convert('L'), dtype=np.float64) / 255.0)


@dataclass(frozen=True)
class LossResult:
    """Loss value with gradients wrt the pose's 6D rotation and translation."""
    value: float
    grad_rot6d: np.ndarray
    grad_translation: np.ndarray


# ---------------------------------------------------------------------------
# Differentiable core
# ---------------------------------------------------------------------------

def _camera_tensors(cam: Camera) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    k = torch.as_tensor(cam.intrinsics, dtype=DTYPE)
    r = torch.as_tensor(cam.extrinsics.rotation, dtype=DTYPE)
    t = torch.as_tensor(cam.extrinsics.translation, dtype=DTYPE)
    return k, r, t


def project_vertices(vertices: torch.Tensor, rotations: torch.Tensor, translations: torch.Tensor,
                     cam: Camera) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Pose template vertices per frame and project them.

    vertices (V, 3), rotations (B, 3, 3), translations (B, 3) ->
    pixel coordinates (B, V, 2) and depth (B, V). Non-positive depths are
    replaced by 1 before the division; callers mask those vertices out.
    """
    k, r_wc, t_wc = _camera_tensors(cam)
    world = torch.einsum('bij,vj->bvi', rotations, vertices) + translations[:, None, :]
    camera = torch.einsum('ij,bvj->bvi', r_wc, world) + t_wc
    depth = camera[..., 2]
    safe = torch.where(depth > MIN_DEPTH, depth, torch.ones_like(depth))
    u = k[0, 0] * camera[..., 0] / safe + k[0, 2]
    v = k[1, 1] * camera[..., 1] / safe + k[1, 2]
    return torch.stack([u, v], dim=-1), depth


def _signed_distance(tri: torch.Tensor, pixels: torch.Tensor) -> torch.Tensor:
    """
    Signed distance of pixel centres to 2D triangles, positive inside.

    tri (B, F, 3, 2), pixels (P, 2) -> (B, F, P).
    """
    p = pixels[None, None]
    orientation = ((tri[:, :, 1, 0] - tri[:, :, 0, 0]) * (tri[:, :, 2, 1] - tri[:, :, 0, 1])
                   - (tri[:, :, 1, 1] - tri[:, :, 0, 1]) * (tri[:, :, 2, 0] - tri[:, :, 0, 0]))
    sign = torch.sign(orientation)[..., None]

    dist_sq = None
    inside = None
    for k in range(3):
        a = tri[:, :, k][:, :, None, :]
        b = tri[:, :, (k + 1) % 3][:, :, None, :]
        edge = b - a
        w = p - a
        t = ((w * edge).sum(-1) / (edge * edge).sum(-1).clamp_min(1e-18)).clamp(0.0, 1.0)
        diff = w - t[..., None] * edge
        d2 = (diff * diff).sum(-1)
        side = (edge[..., 0] * w[..., 1] - edge[..., 1] * w[..., 0]) * sign >= 0
        dist_sq = d2 if dist_sq is None else torch.minimum(dist_sq, d2)
        inside = side if inside is None else inside & side

    # edge-on triangles have no interior
    inside = inside & (orientation.abs() > 1e-12)[..., None]
    dist = torch.sqrt(dist_sq.clamp_min(1e-18))
    return torch.where(inside, dist, -dist)


def _chunk_window(tri: torch.Tensor, valid: torch.Tensor, cam: Camera,
                  margin: float) -> Optional[Tuple[int, int, int, int]]:
    """Pixel window (i0, i1, j0, j1) holding every valid face of the chunk plus margin."""
    if not bool(valid.any()):
        return None
    coords = tri.detach()[valid].reshape(-1, 2)
    u_min, v_min = coords.min(dim=0).values.tolist()
    u_max, v_max = coords.max(dim=0).values.tolist()
    j0 = max(0, int(np.floor(u_min - margin - 0.5)))
    j1 = min(cam.width, int(np.ceil(u_max + margin - 0.5)) + 1)
    i0 = max(0, int(np.floor(v_min - margin - 0.5)))
    i1 = min(cam.height, int(np.ceil(v_max + margin - 0.5)) + 1)
    if j0 >= j1 or i0 >= i1:
        return None
    return i0, i1, j0, j1


def soft_silhouette_batch(vertices: torch.Tensor, faces: torch.Tensor, rotations: torch.Tensor,
                          translations: torch.Tensor, cam: Camera, sigma: float = 1.0,
                          face_chunk: int = DEFAULT_FACE_CHUNK) -> torch.Tensor:
    """
    Differentiable soft silhouettes for B poses of one mesh, shape (B, H, W).

    Faces with a vertex at non-positive depth are dropped. Each face chunk only
    touches the pixel window around its projection (30σ margin); beyond it a
    face contributes below 1e-13.

    Raises:
        BehindCamera: some frame has no face in front of the camera
    """
    if not sigma > 0:
        raise InvalidInput(f'sharpness sigma must be positive, got {sigma}')
    uv, depth = project_vertices(vertices, rotations, translations, cam)
    valid_faces = (depth[:, faces] > MIN_DEPTH).all(dim=-1)
    empty = ~valid_faces.any(dim=1)
    if bool(empty.any()):
        frames = torch.nonzero(empty).flatten().tolist()
        raise BehindCamera(f'no face in front of the camera in frame(s) {frames[:10]}')

    batch = rotations.shape[0]
    accumulated = torch.zeros(batch, cam.height, cam.width, dtype=DTYPE)
    margin = CULL_MARGIN_SIGMAS * sigma
    for start in range(0, faces.shape[0], face_chunk):
        chunk = faces[start:start + face_chunk]
        tri = uv[:, chunk]
        valid = valid_faces[:, start:start + face_chunk]
        window = _chunk_window(tri, valid, cam, margin)
        if window is None:
            continue
        i0, i1, j0, j1 = window
        ys, xs = torch.meshgrid(torch.arange(i0, i1, dtype=DTYPE) + 0.5,
                                torch.arange(j0, j1, dtype=DTYPE) + 0.5, indexing='ij')
        pixels = torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=-1)
        signed = _signed_distance(tri, pixels)
        contribution = torch.where(valid[..., None], F.softplus(signed / sigma), torch.zeros_like(signed))
        window_sum = contribution.sum(dim=1).reshape(batch, i1 - i0, j1 - j0)
        accumulated = accumulated + F.pad(window_sum, (j0, cam.width - j1, i0, cam.height - i1))
    return -torch.expm1(-accumulated)


def mesh_tensors(mesh: TriMesh) -> Tuple[torch.Tensor, torch.Tensor]:
    """Template tensors with faces ordered along the mesh's longest extent."""
    centroids = mesh.vertices[mesh.faces].mean(axis=1)
    axis = int(np.argmax(np.ptp(mesh.vertices, axis=0)))
    order = np.argsort(centroids[:, axis], kind='stable')
    return torch.as_tensor(mesh.vertices, dtype=DTYPE), torch.as_tensor(mesh.faces[order], dtype=torch.long)


def silhouette_energy(rendered: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Σ over pixels of (D − S)², per frame for batched input."""
    return ((rendered - target) ** 2).sum(dim=(-2, -1))


def area_energy(rendered: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """(Σ D − Σ S)², per frame for batched input."""
    return (rendered.sum(dim=(-2, -1)) - target.sum(dim=(-2, -1))) ** 2


# ---------------------------------------------------------------------------
# Single-pose API
# ---------------------------------------------------------------------------

def render_soft_silhouette(mesh: TriMesh, pose: RigidPose, cam: Camera, sigma: float = 1.0) -> SilhouetteMask:
    vertices, faces = mesh_tensors(mesh)
    with torch.no_grad():
        rendered = soft_silhouette_batch(
            vertices, faces,
            torch.as_tensor(pose.rotation, dtype=DTYPE)[None],
            torch.as_tensor(pose.translation, dtype=DTYPE)[None],
            cam, sigma,
        )
    return SilhouetteMask(rendered[0].clamp(0.0, 1.0).numpy())


def _pose_loss(energy, mesh: TriMesh, pose: RigidPose, cam: Camera, sigma: float,
               target: SilhouetteMask) -> LossResult:
    if target.shape != cam.shape:
        raise ShapeMismatch(f'target mask {target.shape} does not match camera {cam.shape}')
    vertices, faces = mesh_tensors(mesh)
    rot6d = torch.tensor(matrix_to_rot6d(pose.rotation), dtype=DTYPE, requires_grad=True)
    translation = torch.tensor(pose.translation, dtype=DTYPE, requires_grad=True)
    rendered = soft_silhouette_batch(vertices, faces, rot6d_to_matrix_torch(rot6d)[None],
                                     translation[None], cam, sigma)
    value = energy(rendered, torch.as_tensor(target.values, dtype=DTYPE)[None]).sum()
    value.backward()
    return LossResult(float(value.detach()), rot6d.grad.numpy().copy(), translation.grad.numpy().copy())


def silhouette_loss(mesh: TriMesh, pose: RigidPose, cam: Camera, sigma: float,
                    target: SilhouetteMask) -> LossResult:
    """Σ‖D(pose) − S‖² with gradients wrt the 6D rotation and translation of ``pose``."""
    return _pose_loss(silhouette_energy, mesh, pose, cam, sigma, target)


def area_loss(mesh: TriMesh, pose: RigidPose, cam: Camera, sigma: float,
              target: SilhouetteMask) -> LossResult:
    """(Σ D(pose) − Σ S)² with gradients wrt the 6D rotation and translation of ``pose``."""
    return _pose_loss(area_energy, mesh, pose, cam, sigma, target)


# ---------------------------------------------------------------------------
# Hard rasterization and visualization
# ---------------------------------------------------------------------------

def hard_silhouette(mesh: TriMesh, pose: RigidPose, cam: Camera) -> SilhouetteMask:
    """Binary union of projected faces sampled at pixel centres (edge functions)."""
    uv, depth = cam.project(pose.apply(mesh.vertices))
    mask = np.zeros(cam.shape, dtype=bool)
    visible = 0
    for face in mesh.faces:
        if np.any(depth[face] <= MIN_DEPTH):
            continue
        visible += 1
        a, b, c = uv[face]
        orientation = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(orientation) <= 1e-12:
            continue
        lo = np.floor(np.minimum(np.minimum(a, b), c) - 0.5).astype(int)
        hi = np.ceil(np.maximum(np.maximum(a, b), c) - 0.5).astype(int) + 1
        j0, j1 = max(lo[0], 0), min(hi[0], cam.width)
        i0, i1 = max(lo[1], 0), min(hi[1], cam.height)
        if j0 >= j1 or i0 >= i1:
            continue
        ys, xs = np.meshgrid(np.arange(i0, i1) + 0.5, np.arange(j0, j1) + 0.5, indexing='ij')
        inside = np.ones(xs.shape, dtype=bool)
        for p, q in ((a, b), (b, c), (c, a)):
            side = (q[0] - p[0]) * (ys - p[1]) - (q[1] - p[1]) * (xs - p[0])
            inside &= side * np.sign(orientation) >= 0
        mask[i0:i1, j0:j1] |= inside
    if visible == 0:
        raise BehindCamera('no face of the posed mesh lies in front of the camera')
    return SilhouetteMask(mask.astype(np.float64))


def overlay(pred: SilhouetteMask, target: SilhouetteMask) -> np.ndarray:
    """RGB uint8 composite: target in red, prediction in green, agreement in yellow."""
    if pred.shape != target.shape:
        raise ShapeMismatch(f'mask shapes differ: {pred.shape} vs {target.shape}')
    rgb = np.zeros(pred.shape + (3,), dtype=np.float64)
    rgb[..., 0] = target.values
    rgb[..., 1] = pred.values
    return np.round(rgb * 255.0).astype(np.uint8)
