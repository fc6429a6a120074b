"""
Rotation representations, rigid transforms, triangle meshes, Procrustes
alignment and Chamfer distance.

Units are meters everywhere; only chamfer_distance reports centimeters.
All functions are pure and operate on numpy arrays (a torch variant of the
6D mapping is provided for the optimizers).
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
import torch
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .errors import DegenerateInput, EmptySet, InvalidInput
from .logging_config import get_logger

logger = get_logger(__name__)

_EPS_NORM = 1e-12
METERS_TO_CM = 100.0


# ---------------------------------------------------------------------------
# 6D rotation representation
# ---------------------------------------------------------------------------

def rot6d_to_matrix(r: Sequence[float]) -> np.ndarray:
    """
    Map a 6D rotation (first two matrix columns, column-major) to SO(3).

    Gram-Schmidt on the two columns, third column by cross product.

    Raises:
        DegenerateInput: a column is (near) zero or the columns are parallel
    """
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-1] != 6:
        raise InvalidInput(f'6D rotation needs 6 components, got shape {r.shape}')
    if not np.all(np.isfinite(r)):
        raise InvalidInput('6D rotation has non-finite components')

    a1, a2 = r[..., :3], r[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 < _EPS_NORM) or np.any(np.linalg.norm(a2, axis=-1) < _EPS_NORM):
        raise DegenerateInput('6D rotation column has norm below 1e-12')
    b1 = a1 / n1
    u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if np.any(n2 < _EPS_NORM * np.maximum(1.0, np.linalg.norm(a2, axis=-1, keepdims=True))):
        raise DegenerateInput('6D rotation columns are parallel')
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def matrix_to_rot6d(m: np.ndarray) -> np.ndarray:
    """Inverse of rot6d_to_matrix: the first two columns, column-major."""
    m = np.asarray(m, dtype=np.float64)
    return np.concatenate([m[..., :, 0], m[..., :, 1]], axis=-1)


def rot6d_to_matrix_torch(x: torch.Tensor) -> torch.Tensor:
    """Batched, differentiable rot6d -> matrix for the optimizers (no degeneracy checks)."""
    a1, a2 = x[..., :3], x[..., 3:]
    b1 = a1 / torch.linalg.norm(a1, dim=-1, keepdim=True)
    u2 = a2 - (b1 * a2).sum(dim=-1, keepdim=True) * b1
    b2 = u2 / torch.linalg.norm(u2, dim=-1, keepdim=True)
    b3 = torch.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1)


def matrix_to_rot6d_torch(m: torch.Tensor) -> torch.Tensor:
    return torch.cat([m[..., :, 0], m[..., :, 1]], dim=-1)


def is_rotation(m: np.ndarray, tol: float = 1e-9) -> bool:
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        return False
    return bool(np.allclose(m.T @ m, np.eye(3), atol=tol) and abs(np.linalg.det(m) - 1.0) < tol)


def geodesic_angle(a: np.ndarray, b: np.ndarray) -> float:
    """Angle in radians of the relative rotation aᵀb."""
    rel = np.asarray(a).T @ np.asarray(b)
    cos = np.clip((np.trace(rel) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.arccos(cos))


def project_to_so3(m: np.ndarray) -> np.ndarray:
    """Closest rotation in Frobenius norm, with determinant sign correction."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=np.float64))
    s = np.diag([1.0, 1.0, np.sign(np.linalg.det(u @ vt)) or 1.0])
    return u @ s @ vt


def axis_angle_to_matrix(rotvec: Sequence[float]) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64)).as_matrix()


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation drawn from ``rng``."""
    return Rotation.random(random_state=rng).as_matrix()


# ---------------------------------------------------------------------------
# Poses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RigidPose:
    """Rotation (3x3) and translation (meters)."""
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not is_rotation(rotation, tol=1e-6):
            raise InvalidInput('RigidPose rotation is not a proper rotation matrix')
        if not np.all(np.isfinite(translation)):
            raise InvalidInput('RigidPose translation is not finite')
        object.__setattr__(self, 'rotation', rotation)
        object.__setattr__(self, 'translation', translation)

    @classmethod
    def identity(cls) -> 'RigidPose':
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other: 'RigidPose') -> 'RigidPose':
        """self ∘ other: apply ``other`` first."""
        return RigidPose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> 'RigidPose':
        return RigidPose(self.rotation.T, -self.rotation.T @ self.translation)


@dataclass(frozen=True)
class PoseSequence:
    """Per-frame object poses sampled every ``frame_interval`` seconds."""
    frames: Tuple[RigidPose, ...]
    frame_interval: float

    def __post_init__(self):
        frames = tuple(self.frames)
        if len(frames) < 1:
            raise InvalidInput('PoseSequence needs at least one frame')
        if not self.frame_interval > 0:
            raise InvalidInput(f'frame_interval must be positive, got {self.frame_interval}')
        object.__setattr__(self, 'frames', frames)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def rotations(self) -> np.ndarray:
        return np.stack([f.rotation for f in self.frames])

    @property
    def translations(self) -> np.ndarray:
        return np.stack([f.translation for f in self.frames])

    @property
    def fps(self) -> float:
        return 1.0 / self.frame_interval

    @classmethod
    def from_arrays(cls, rotations: np.ndarray, translations: np.ndarray, frame_interval: float) -> 'PoseSequence':
        return cls(tuple(RigidPose(r, t) for r, t in zip(rotations, translations)), frame_interval)


# ---------------------------------------------------------------------------
# Meshes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TriMesh:
    """Triangle mesh; vertices in meters, faces as vertex-index triples."""
    vertices: np.ndarray
    faces: np.ndarray = field(repr=False)

    def __post_init__(self):
        vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(faces) == 0:
            raise DegenerateInput('mesh has no faces')
        if faces.min() < 0 or faces.max() >= len(vertices):
            raise InvalidInput(f'face index out of range for {len(vertices)} vertices')
        if not np.all(np.isfinite(vertices)):
            raise InvalidInput('mesh vertices are not finite')
        object.__setattr__(self, 'vertices', vertices)
        object.__setattr__(self, 'faces', faces)
        areas = self.face_areas()
        if np.any(areas <= 1e-15):
            bad = int(np.argmin(areas))
            raise DegenerateInput(f'face {bad} has zero area')

    def face_areas(self) -> np.ndarray:
        tri = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def posed(self, pose: RigidPose) -> 'TriMesh':
        return TriMesh(pose.apply(self.vertices), self.faces)

    @classmethod
    def load_obj(cls, path: Union[str, Path]) -> 'TriMesh':
        """Read ``v`` and ``f`` records; normals, UVs and other records are ignored."""
        vertices: List[List[float]] = []
        faces: List[List[int]] = []
        with open(path, 'r', encoding='utf-8') as f:
            for line in f:
                parts = line.split()
                if not parts:
                    continue
                if parts[0] == 'v':
                    vertices.append([float(x) for x in parts[1:4]])
                elif parts[0] == 'f':
                    # "f 1/2/3 4/5/6 ..." -> vertex indices only; fan-triangulate polygons
                    idx = [int(p.split('/')[0]) for p in parts[1:]]
                    idx = [i - 1 if i > 0 else len(vertices) + i for i in idx]
                    for k in range(1, len(idx) - 1):
                        faces.append([idx[0], idx[k], idx[k + 1]])
        logger.debug(f'Loaded {len(vertices)} vertices and {len(faces)} faces from {path}')
        return cls(np.array(vertices), np.array(faces))

    def save_obj(self, path: Union[str, Path]) -> None:
        with open(path, 'w', encoding='utf-8') as f:
            for v in self.vertices:
                f.write(f'v {v[0]:.9f} {v[1]:.9f} {v[2]:.9f}\n')
            for face in self.faces + 1:
                f.write(f'f {face[0]} {face[1]} {face[2]}\n')

    @classmethod
    def from_spec(cls, spec: str) -> 'TriMesh':
        """
        Build a mesh from a path or a builtin spec.

        ``builtin:box[:size]`` or ``builtin:sphere[:radius[:rings[:segments]]]``.
        """
        if spec.startswith('builtin:'):
            parts = spec.split(':')[1:]
            kind, args = parts[0], [float(a) for a in parts[1:]]
            if kind == 'box':
                return make_box(*args[:1])
            if kind == 'sphere':
                radius = args[0] if args else 0.1
                rings = int(args[1]) if len(args) > 1 else 16
                segments = int(args[2]) if len(args) > 2 else 16
                return make_uv_sphere(radius, rings, segments)
            raise InvalidInput(f'unknown builtin mesh: {kind}')
        return cls.load_obj(spec)


def make_box(size: float = 0.2) -> TriMesh:
    """Axis-aligned cube centred at the origin, outward-facing triangles."""
    h = size / 2.0
    vertices = np.array([
        [-h, -h, -h], [h, -h, -h], [h, h, -h], [-h, h, -h],
        [-h, -h, h], [h, -h, h], [h, h, h], [-h, h, h],
    ])
    faces = np.array([
        [0, 2, 1], [0, 3, 2],  # -z
        [4, 5, 6], [4, 6, 7],  # +z
        [0, 1, 5], [0, 5, 4],  # -y
        [3, 7, 6], [3, 6, 2],  # +y
        [0, 4, 7], [0, 7, 3],  # -x
        [1, 2, 6], [1, 6, 5],  # +x
    ])
    return TriMesh(vertices, faces)


def make_uv_sphere(radius: float = 0.1, rings: int = 16, segments: int = 16) -> TriMesh:
    """Latitude/longitude sphere with 2·segments·(rings-1) faces."""
    if rings < 2 or segments < 3:
        raise InvalidInput('sphere needs rings >= 2 and segments >= 3')
    vertices = [[0.0, 0.0, radius]]
    for i in range(1, rings):
        theta = np.pi * i / rings
        for j in range(segments):
            phi = 2.0 * np.pi * j / segments
            vertices.append([radius * np.sin(theta) * np.cos(phi),
                             radius * np.sin(theta) * np.sin(phi),
                             radius * np.cos(theta)])
    vertices.append([0.0, 0.0, -radius])
    south = len(vertices) - 1

    def ring(i: int, j: int) -> int:
        return 1 + (i - 1) * segments + (j % segments)

    faces = []
    for j in range(segments):
        faces.append([0, ring(1, j), ring(1, j + 1)])
    for i in range(1, rings - 1):
        for j in range(segments):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces.append([a, c, d])
            faces.append([a, d, b])
    for j in range(segments):
        faces.append([south, ring(rings - 1, j + 1), ring(rings - 1, j)])
    return TriMesh(np.array(vertices), np.array(faces))


def sample_surface_barycentric(mesh: TriMesh, n: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Area-weighted face choice with uniform barycentric coordinates.

    Returns (face ids (n,), barycentric weights (n, 3)); posing the template
    and re-evaluating these samples gives corresponding points across poses.
    """
    if n < 1:
        raise InvalidInput(f'sample count must be >= 1, got {n}')
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    face_ids = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    return face_ids, bary


def points_from_barycentric(vertices: np.ndarray, faces: np.ndarray,
                            face_ids: np.ndarray, bary: np.ndarray) -> np.ndarray:
    tri = np.asarray(vertices)[np.asarray(faces)[face_ids]]
    return np.einsum('nk,nkd->nd', bary, tri)


def sample_surface(mesh: TriMesh, n: int, seed: int) -> np.ndarray:
    """n points uniformly distributed over the mesh surface; deterministic given seed."""
    face_ids, bary = sample_surface_barycentric(mesh, n, seed)
    return points_from_barycentric(mesh.vertices, mesh.faces, face_ids, bary)


# ---------------------------------------------------------------------------
# Alignment and distances
# ---------------------------------------------------------------------------

def procrustes_align(source: np.ndarray, target: np.ndarray,
                     with_scale: bool = True) -> Tuple[np.ndarray, np.ndarray, float]:
    """
    Closed-form (R, t, s) minimizing Σ‖s·R·p + t − q‖² over corresponding points.

    SVD of the cross-covariance with determinant sign correction; with_scale=False
    fixes s = 1.

    Raises:
        DegenerateInput: fewer than 3 points, mismatched counts, or collinear source
    """
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if len(src) != len(dst):
        raise DegenerateInput(f'point counts differ: {len(src)} vs {len(dst)}')
    if len(src) < 3:
        raise DegenerateInput(f'Procrustes needs at least 3 points, got {len(src)}')

    mu_s, mu_t = src.mean(axis=0), dst.mean(axis=0)
    x, y = src - mu_s, dst - mu_t
    spread = np.linalg.svd(x, compute_uv=False)
    if spread[0] < _EPS_NORM or spread[1] < 1e-9 * spread[0]:
        raise DegenerateInput('source points are collinear (rank-deficient covariance)')

    cov = y.T @ x / len(src)
    u, d, vt = np.linalg.svd(cov)
    s_fix = np.diag([1.0, 1.0, -1.0 if np.linalg.det(u) * np.linalg.det(vt) < 0 else 1.0])
    rotation = u @ s_fix @ vt
    if with_scale:
        var_x = np.sum(x * x) / len(src)
        scale = float(np.trace(np.diag(d) @ s_fix) / var_x)
    else:
        scale = 1.0
    translation = mu_t - scale * rotation @ mu_s
    return rotation, translation, scale


def apply_similarity(points: np.ndarray, rotation: np.ndarray, translation: np.ndarray, scale: float) -> np.ndarray:
    return scale * (np.asarray(points) @ rotation.T) + translation


def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    """
    Symmetric mean nearest-neighbour distance in centimeters:
    0.5·(mean_a NN(a→b) + mean_b NN(b→a)).
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise EmptySet('chamfer_distance needs two non-empty point sets')
    d_ab, _ = cKDTree(b).query(a, k=1)
    d_ba, _ = cKDTree(a).query(b, k=1)
    return float(0.5 * (d_ab.mean() + d_ba.mean()) * METERS_TO_CM)
