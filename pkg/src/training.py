"""
Training of interaction filters: composite loss with staged regularizers,
Adam with cosine decay, and an EMA shadow copy of the denoiser.
"""

import copy
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Literal, Mapping, Optional

import numpy as np
import torch

from .diffusion import Denoiser, DiffusionSchedule, q_sample
from .errors import EmptySet, NonFiniteLoss, ShapeMismatch
from .filter_losses import loss_consistency, loss_imu, loss_offset, loss_simple, loss_velocity
from .interaction import CONDITION_INDEX, HAND_INDEX, STATE_DIM
from .logging_config import get_logger, log_performance
from .skeleton import SkeletonModel

logger = get_logger(__name__)


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 200
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    lambda_off: float = 1.0
    lambda_vel: float = 1.0
    lambda_consist: float = 1.0
    lambda_imu: float = 100.0
    simple_only_epochs: int = 0
    regularizer_warmup_epochs: int = 35
    ema_every: int = 10
    ema_decay: float = 0.995
    mode: Literal['physical', 'literal'] = 'physical'
    hand_mask_prob: float = 0.5

    @classmethod
    def from_section(cls, section, seed: int = 0) -> 'TrainSettings':
        return cls(epochs=section.epochs, batch_size=section.batch_size, lr=section.lr, seed=seed,
                   lambda_off=section.lambda_off, lambda_vel=section.lambda_vel,
                   lambda_consist=section.lambda_consist, lambda_imu=section.lambda_imu,
                   simple_only_epochs=section.simple_only_epochs,
                   regularizer_warmup_epochs=section.regularizer_warmup_epochs,
                   ema_every=section.ema_every, ema_decay=section.ema_decay, mode=section.mode)


@dataclass
class TrainResult:
    denoiser: Denoiser
    ema: Denoiser
    loss_trace: List[float] = field(default_factory=list)
    epoch_losses: List[Dict[str, float]] = field(default_factory=list)


def active_terms(settings: TrainSettings, epoch: int) -> Dict[str, float]:
    """Regularizer weights in force at a (global) epoch; zero weights are left out."""
    if epoch < settings.simple_only_epochs:
        return {}
    terms = {'offset': settings.lambda_off, 'velocity': settings.lambda_vel}
    if epoch >= settings.simple_only_epochs + settings.regularizer_warmup_epochs:
        terms.update(consistency=settings.lambda_consist, imu=settings.lambda_imu)
    return {name: weight for name, weight in terms.items() if weight > 0}


def update_ema(ema: Denoiser, model: Denoiser, decay: float) -> None:
    with torch.no_grad():
        for shadow, param in zip(ema.parameters(), model.parameters()):
            shadow.mul_(decay).add_(param, alpha=1.0 - decay)


def _conditions(x0: torch.Tensor, valid: torch.Tensor):
    c = x0[..., CONDITION_INDEX]
    m = x0[..., HAND_INDEX] * valid.view(-1, 1, 1)
    return c, m


def _model_dtype(model: Denoiser) -> torch.dtype:
    params = list(model.parameters())
    return params[0].dtype if params else torch.float64


@log_performance(logger)
def train_filter(windows: np.ndarray, denoiser: Denoiser, schedule: DiffusionSchedule, settings: TrainSettings,
                 skeleton: Optional[SkeletonModel] = None, scale: float = 1.0, frame_interval: float = 1.0 / 30,
                 epoch_offset: int = 0) -> TrainResult:
    """
    Fit ``denoiser`` to clean windows (N, W, 486).

    ``epoch_offset`` shifts the staging so a fine-tune continuing a warm-up
    starts in the regularized phases.
    """
    windows = np.asarray(windows)
    if windows.ndim != 3 or windows.shape[-1] != STATE_DIM:
        raise ShapeMismatch(f'expected (N, W, {STATE_DIM}) windows, got {windows.shape}')
    if len(windows) == 0:
        raise EmptySet('training set has no windows')
    if settings.lambda_consist > 0 and skeleton is None:
        raise ShapeMismatch('consistency loss needs a skeleton')

    ema = copy.deepcopy(denoiser)
    result = TrainResult(denoiser, ema)
    if settings.epochs == 0:
        return result

    dtype = _model_dtype(denoiser)
    data = torch.as_tensor(windows, dtype=dtype)
    generator = torch.Generator().manual_seed(settings.seed)
    optimizer = torch.optim.Adam(denoiser.parameters(), lr=settings.lr)
    batches = math.ceil(len(data) / settings.batch_size)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=settings.epochs * batches,
                                                           eta_min=0.01 * settings.lr)
    logger.info(f'Training filter on {len(data)} windows for {settings.epochs} epochs '
                f'(batch {settings.batch_size}, lr {settings.lr})')

    denoiser.train()
    for epoch in range(settings.epochs):
        terms = active_terms(settings, epoch_offset + epoch)
        totals: Dict[str, float] = {}
        order = torch.randperm(len(data), generator=generator)
        for b in range(batches):
            x0 = data[order[b * settings.batch_size:(b + 1) * settings.batch_size]]
            steps = torch.randint(1, schedule.steps + 1, (len(x0),), generator=generator)
            noise = torch.randn(x0.shape, generator=generator, dtype=dtype)
            valid = (torch.rand(len(x0), generator=generator) >= settings.hand_mask_prob).to(dtype)
            c, m = _conditions(x0, valid)
            pred = denoiser(q_sample(x0, steps, schedule, noise), steps, c, m, valid)

            parts = {'simple': loss_simple(pred, x0)}
            if 'offset' in terms:
                parts['offset'] = loss_offset(pred, x0)
            if 'velocity' in terms:
                parts['velocity'] = loss_velocity(pred, x0)
            if 'consistency' in terms:
                parts['consistency'] = loss_consistency(pred, skeleton, scale)
            if 'imu' in terms:
                parts['imu'] = loss_imu(pred, x0, frame_interval, settings.mode)
            loss = parts['simple']
            for name, weight in terms.items():
                loss = loss + weight * parts[name]

            value = float(loss.detach())
            result.loss_trace.append(value)
            if not math.isfinite(value):
                raise NonFiniteLoss(f'non-finite training loss at epoch {epoch}', result.loss_trace)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            scheduler.step()
            for name, part in parts.items():
                totals[name] = totals.get(name, 0.0) + float(part.detach()) / batches

        if (epoch + 1) % settings.ema_every == 0:
            update_ema(ema, denoiser, settings.ema_decay)
        result.epoch_losses.append(totals)
        logger.debug(f'epoch {epoch}: ' + ', '.join(f'{k}={v:.5f}' for k, v in totals.items()),
                     extra={'extra_fields': {'epoch': epoch, **totals}})

    denoiser.eval()
    ema.eval()
    denoiser.is_trained = True
    ema.is_trained = True
    logger.info(f'Training finished: final loss {result.loss_trace[-1]:.5f}')
    return result


def evaluate_simple(denoiser: Denoiser, windows: np.ndarray, schedule: DiffusionSchedule, n: int,
                    seed: int = 0, hand_valid: bool = True) -> float:
    """L_simple of the denoiser's x0 prediction at a fixed noise level."""
    schedule.check_step(n)
    dtype = _model_dtype(denoiser)
    x0 = torch.as_tensor(np.asarray(windows), dtype=dtype)
    generator = torch.Generator().manual_seed(seed)
    noise = torch.randn(x0.shape, generator=generator, dtype=dtype)
    steps = torch.full((len(x0),), n, dtype=torch.long)
    valid = torch.full((len(x0),), 1.0 if hand_valid else 0.0, dtype=dtype)
    c, m = _conditions(x0, valid)
    with torch.no_grad():
        pred = denoiser(q_sample(x0, steps, schedule, noise), steps, c, m, valid)
    return float(loss_simple(pred, x0))


def train_category_filters(datasets: Mapping[str, np.ndarray], make_denoiser: Callable[[], Denoiser],
                           schedule: DiffusionSchedule, settings: TrainSettings,
                           skeleton: Optional[SkeletonModel] = None, scale: float = 1.0,
                           frame_interval: float = 1.0 / 30) -> Dict[str, TrainResult]:
    """
    Shared warm-up with L_simple on every category's windows, then one
    regularized fine-tune per category starting from the warm-up weights.
    """
    if not datasets:
        raise EmptySet('no category datasets')
    base = make_denoiser()
    if settings.simple_only_epochs > 0:
        union = np.concatenate([np.asarray(w) for w in datasets.values()])
        logger.info(f'Warm-up on {len(union)} windows from {len(datasets)} categories')
        train_filter(union, base, schedule, replace(settings, epochs=settings.simple_only_epochs),
                     skeleton, scale, frame_interval)

    results = {}
    for k, (category, windows) in enumerate(sorted(datasets.items())):
        logger.info(f'Fine-tuning filter for category {category!r}')
        model = copy.deepcopy(base)
        results[category] = train_filter(windows, model, schedule,
                                         replace(settings, seed=settings.seed + k + 1),
                                         skeleton, scale, frame_interval,
                                         epoch_offset=settings.simple_only_epochs)
    return results
