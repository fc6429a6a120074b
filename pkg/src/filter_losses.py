"""
Training losses of the interaction filter.

All losses take windows shaped (T, 486) or (B, T, 486), as torch tensors or
numpy arrays, and return a scalar tensor. Frame-wise terms sum L1 over the
coordinates of a frame and average over frames (and batch).
"""

from typing import Literal, Tuple, Union

import numpy as np
import torch

from .errors import ShapeMismatch, TooShort
from .geometry import rot6d_to_matrix_torch
from .interaction import A, J_H, J_O, JOINTS, Q, STATE_DIM, THETA_H, THETA_O
from .skeleton import SkeletonModel, forward_kinematics_torch

ArrayLike = Union[np.ndarray, torch.Tensor]
AccelerationMode = Literal['physical', 'literal']


def _as_batch(x: ArrayLike) -> torch.Tensor:
    t = torch.as_tensor(x)
    if not t.is_floating_point():
        t = t.double()
    if t.dim() == 2:
        t = t.unsqueeze(0)
    if t.dim() != 3 or t.shape[-1] != STATE_DIM:
        raise ShapeMismatch(f'expected (T, {STATE_DIM}) or (B, T, {STATE_DIM}) windows, got {tuple(t.shape)}')
    return t


def _pair(pred: ArrayLike, target: ArrayLike) -> Tuple[torch.Tensor, torch.Tensor]:
    p, t = _as_batch(pred), _as_batch(target)
    if p.shape != t.shape:
        raise ShapeMismatch(f'prediction {tuple(p.shape)} and target {tuple(t.shape)} differ')
    return p, t.to(p.dtype)


def loss_simple(pred: ArrayLike, target: ArrayLike) -> torch.Tensor:
    """Mean absolute error over every coordinate and frame."""
    p, t = _pair(pred, target)
    return (p - t).abs().mean()


def _offsets(x: torch.Tensor) -> torch.Tensor:
    joints = x[..., J_H].reshape(*x.shape[:-1], JOINTS, 3)
    return x[..., J_O].unsqueeze(-2) - joints


def loss_offset(pred: ArrayLike, target: ArrayLike) -> torch.Tensor:
    """Object-to-joint offsets, summed over the 52 joints per frame."""
    p, t = _pair(pred, target)
    return (_offsets(p) - _offsets(t)).abs().sum(dim=(-2, -1)).mean()


def loss_consistency(pred: ArrayLike, skeleton: SkeletonModel, shape: float = 1.0) -> torch.Tensor:
    """Predicted joint positions against forward kinematics of the predicted rotations."""
    p = _as_batch(pred)
    if skeleton.joint_count != JOINTS:
        raise ShapeMismatch(f'consistency needs a {JOINTS}-joint skeleton, got {skeleton.joint_count}')
    batch, frames = p.shape[:2]
    joints = p[..., J_H].reshape(batch * frames, JOINTS, 3)
    rotations = rot6d_to_matrix_torch(p[..., THETA_H].reshape(batch * frames, JOINTS, 6))
    offsets = torch.as_tensor(skeleton.offsets, dtype=p.dtype)
    roots = joints[:, 0] - shape * offsets[0]
    fk = forward_kinematics_torch(skeleton.parents, offsets, roots, rotations, shape)
    return (joints - fk).abs().sum(dim=(-2, -1)).mean()


def _positions(x: torch.Tensor) -> torch.Tensor:
    return torch.cat([x[..., J_H], x[..., J_O]], dim=-1)


def loss_velocity(pred: ArrayLike, target: ArrayLike) -> torch.Tensor:
    """Frame-difference discrepancy of the concatenated human and object positions."""
    p, t = _pair(pred, target)
    if p.shape[1] < 2:
        raise TooShort('velocity loss needs at least 2 frames')
    dp = torch.diff(_positions(p), dim=1)
    dt = torch.diff(_positions(t), dim=1)
    return (dp - dt).abs().sum(dim=-1).mean()


def acceleration_increment(acc: torch.Tensor, frame_interval: float, mode: AccelerationMode) -> torch.Tensor:
    if mode == 'literal':
        return 0.5 * acc * frame_interval ** 2
    return acc * frame_interval ** 2


def loss_imu_terms(pred: ArrayLike, target: ArrayLike, frame_interval: float,
                   mode: AccelerationMode = 'physical') -> Tuple[torch.Tensor, torch.Tensor]:
    """
    (L_rot, L_acc). The IMU rotation q and free acceleration a are read from
    the target window. L_acc mixes predicted increments with the target's
    next-frame difference, over interior frames 1..T-2.
    """
    p, t = _pair(pred, target)
    frames = p.shape[1]
    if frames < 2:
        raise TooShort('IMU loss needs at least 2 frames')
    rot = (p[..., THETA_O] - t[..., Q]).abs().sum(dim=-1).mean()
    if frames < 3:
        return rot, p.new_zeros(())
    j_hat, j = p[..., J_O], t[..., J_O]
    increment = acceleration_increment(t[:, 1:-1, A], frame_interval, mode)
    lhs = j_hat[:, 1:-1] - j_hat[:, :-2] + increment
    rhs = j[:, 2:] - j[:, 1:-1]
    acc = (lhs - rhs).abs().sum(dim=-1).mean()
    return rot, acc


def loss_imu(pred: ArrayLike, target: ArrayLike, frame_interval: float,
             mode: AccelerationMode = 'physical') -> torch.Tensor:
    rot, acc = loss_imu_terms(pred, target, frame_interval, mode)
    return rot + acc
