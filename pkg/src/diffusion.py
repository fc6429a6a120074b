"""
Interaction diffusion filter: noise schedule, forward noising, the
x0-predicting denoiser interface with a reference MLP, denoiser file I/O and
the reverse process used to refine captured windows.

Steps are numbered 1..N; step n uses beta[n - 1].
"""

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Tuple, Union

import numpy as np
import torch
from torch import nn

from .errors import InvalidInput, MissingArtifact, ShapeMismatch, StepOutOfRange, UntrainedDenoiser
from .interaction import CONDITION_DIM, CONDITION_INDEX, HAND_DIM, HAND_INDEX, STATE_DIM, window_starts
from .logging_config import get_logger, log_performance
from .utils import array_digest

logger = get_logger(__name__)

FILE_FORMAT = 'imhoi-denoiser'
FILE_VERSION = 1
_HEADER_LENGTH = struct.Struct('<Q')

ScheduleKind = Literal['linear', 'cosine']


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray
    kind: str = 'linear'

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64).reshape(-1)
        if len(betas) < 1:
            raise InvalidInput('schedule needs at least one step')
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise InvalidInput('every beta must lie in (0, 1)')
        object.__setattr__(self, 'betas', betas)

    @property
    def steps(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    @property
    def digest(self) -> str:
        return array_digest(self.betas)

    def check_step(self, n: int) -> None:
        if not 1 <= int(n) <= self.steps:
            raise StepOutOfRange(f'step {n} outside 1..{self.steps}')

    def alpha_bar(self, n: int) -> float:
        self.check_step(n)
        return float(self.alpha_bars[n - 1])

    def posterior(self, n: int) -> Tuple[float, float, float]:
        """Coefficients (on x̂0, on x_n) and variance of q(x_{n-1} | x_n, x̂0), n >= 2."""
        self.check_step(n)
        if n < 2:
            raise StepOutOfRange('posterior is defined for n >= 2')
        beta = self.betas[n - 1]
        bar, bar_prev = self.alpha_bars[n - 1], self.alpha_bars[n - 2]
        coef_x0 = beta * math.sqrt(bar_prev) / (1.0 - bar)
        coef_xn = (1.0 - bar_prev) * math.sqrt(1.0 - beta) / (1.0 - bar)
        variance = beta * (1.0 - bar_prev) / (1.0 - bar)
        return float(coef_x0), float(coef_xn), float(variance)

    def describe(self) -> Dict[str, Any]:
        return {'kind': self.kind, 'steps': self.steps, 'beta_first': float(self.betas[0]),
                'beta_last': float(self.betas[-1]), 'digest': self.digest}

    @classmethod
    def linear(cls, steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> 'DiffusionSchedule':
        return cls(np.linspace(beta_start, beta_end, steps), 'linear')

    @classmethod
    def cosine(cls, steps: int = 1000, offset: float = 0.008, max_beta: float = 0.999) -> 'DiffusionSchedule':
        t = np.arange(steps + 1) / steps
        f = np.cos((t + offset) / (1 + offset) * np.pi / 2) ** 2
        bars = f / f[0]
        betas = np.clip(1.0 - bars[1:] / bars[:-1], 1e-8, max_beta)
        return cls(betas, 'cosine')

    @classmethod
    def build(cls, kind: ScheduleKind, steps: int, beta_start: float = 1e-4,
              beta_end: float = 2e-2) -> 'DiffusionSchedule':
        if kind == 'cosine':
            return cls.cosine(steps)
        return cls.linear(steps, beta_start, beta_end)


def forward_diffuse(x0: np.ndarray, n: int, schedule: DiffusionSchedule, seed: int) -> np.ndarray:
    """Marginal sample x_n = √ᾱ_n·x0 + √(1-ᾱ_n)·ε from one seeded Gaussian draw."""
    bar = schedule.alpha_bar(n)
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.random.default_rng(seed).standard_normal(x0.shape)
    return math.sqrt(bar) * x0 + math.sqrt(1.0 - bar) * noise


def forward_step(x_prev: np.ndarray, n: int, schedule: DiffusionSchedule, rng: np.random.Generator) -> np.ndarray:
    """One transition q(x_n | x_{n-1})."""
    schedule.check_step(n)
    alpha = 1.0 - schedule.betas[n - 1]
    return math.sqrt(alpha) * x_prev + math.sqrt(1.0 - alpha) * rng.standard_normal(np.shape(x_prev))


def q_sample(x0: torch.Tensor, steps: torch.Tensor, schedule: DiffusionSchedule,
             noise: torch.Tensor) -> torch.Tensor:
    """Batched marginal sample for training; ``steps`` (B,) in 1..N."""
    bars = torch.as_tensor(schedule.alpha_bars, dtype=x0.dtype, device=x0.device)[steps - 1]
    shape = (-1,) + (1,) * (x0.dim() - 1)
    return bars.sqrt().view(shape) * x0 + (1.0 - bars).sqrt().view(shape) * noise


# ---------------------------------------------------------------------------
# Denoisers
# ---------------------------------------------------------------------------

def step_embedding(steps: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer noise levels (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half, 1))
    args = steps.float().unsqueeze(-1) * freqs.unsqueeze(0)
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class Denoiser(nn.Module):
    """
    Maps (noised window, noise level, condition window) to a predicted clean
    window of the same shape.

    forward(x_n (B, W, 486), steps (B,), c (B, W, 216), m (B, W, 270),
            hand_valid (B,)) -> (B, W, 486)
    """

    architecture = 'base'

    def __init__(self):
        super().__init__()
        self.is_trained = False

    def get_flat_parameters(self) -> torch.Tensor:
        params = [p.detach().reshape(-1) for p in self.parameters()]
        return torch.cat(params) if params else torch.zeros(0)

    def set_flat_parameters(self, flat: torch.Tensor) -> None:
        flat = torch.as_tensor(flat).reshape(-1)
        expected = sum(p.numel() for p in self.parameters())
        if flat.numel() != expected:
            raise ShapeMismatch(f'expected {expected} parameters, got {flat.numel()}')
        offset = 0
        with torch.no_grad():
            for p in self.parameters():
                p.copy_(flat[offset:offset + p.numel()].view_as(p))
                offset += p.numel()

    def config(self) -> Dict[str, Any]:
        return {}


class MlpDenoiser(Denoiser):
    """Flattened-window MLP with a sinusoidal step embedding; output layer starts at zero."""

    architecture = 'mlp'

    def __init__(self, window: int = 16, hidden: int = 256, layers: int = 3, embed_dim: int = 64):
        super().__init__()
        if window < 1 or hidden < 1 or layers < 1 or embed_dim < 2:
            raise InvalidInput('window, hidden, layers must be positive and embed_dim >= 2')
        self.window = window
        self.hidden = hidden
        self.layers = layers
        self.embed_dim = embed_dim
        in_features = window * (STATE_DIM + CONDITION_DIM + HAND_DIM) + 1 + embed_dim
        blocks = []
        width = in_features
        for _ in range(layers):
            blocks += [nn.Linear(width, hidden), nn.SiLU()]
            width = hidden
        self.body = nn.Sequential(*blocks)
        self.head = nn.Linear(hidden, window * STATE_DIM)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x_n: torch.Tensor, steps: torch.Tensor, c: torch.Tensor, m: torch.Tensor,
                hand_valid: torch.Tensor) -> torch.Tensor:
        batch = x_n.shape[0]
        if x_n.shape[1:] != (self.window, STATE_DIM):
            raise ShapeMismatch(f'denoiser window is ({self.window}, {STATE_DIM}), got {tuple(x_n.shape[1:])}')
        features = torch.cat([
            x_n.reshape(batch, -1), c.reshape(batch, -1), m.reshape(batch, -1),
            hand_valid.reshape(batch, 1).to(x_n.dtype), step_embedding(steps, self.embed_dim).to(x_n.dtype),
        ], dim=-1)
        return self.head(self.body(features)).view(batch, self.window, STATE_DIM)

    def config(self) -> Dict[str, Any]:
        return {'window': self.window, 'hidden': self.hidden, 'layers': self.layers, 'embed_dim': self.embed_dim}


ARCHITECTURES = {MlpDenoiser.architecture: MlpDenoiser}


# ---------------------------------------------------------------------------
# Denoiser file: u64 header length | JSON header | float32 parameters
# ---------------------------------------------------------------------------

def save_denoiser(path: Union[str, Path], denoiser: Denoiser, schedule: DiffusionSchedule,
                  seed: int = 0, extra: Optional[Dict[str, Any]] = None) -> None:
    state = denoiser.state_dict()
    header = {
        'format': FILE_FORMAT,
        'version': FILE_VERSION,
        'architecture': denoiser.architecture,
        'config': denoiser.config(),
        'is_trained': bool(denoiser.is_trained),
        'seed': seed,
        'schedule': schedule.describe(),
        'parameters': [{'name': name, 'shape': list(t.shape)} for name, t in state.items()],
    }
    if extra:
        header.update(extra)
    encoded = json.dumps(header, sort_keys=True).encode('utf-8')
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(_HEADER_LENGTH.pack(len(encoded)))
        f.write(encoded)
        for tensor in state.values():
            f.write(tensor.detach().cpu().numpy().astype('<f4').tobytes())
    logger.info(f'Saved {denoiser.architecture} denoiser to {path}')


def load_denoiser(path: Union[str, Path]) -> Tuple[Denoiser, Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(path, 'run train-filter first')
    with open(path, 'rb') as f:
        raw = f.read()
    (length,) = _HEADER_LENGTH.unpack_from(raw, 0)
    header = json.loads(raw[_HEADER_LENGTH.size:_HEADER_LENGTH.size + length].decode('utf-8'))
    if header.get('format') != FILE_FORMAT:
        raise InvalidInput(f'{path} is not a denoiser file')
    cls = ARCHITECTURES.get(header['architecture'])
    if cls is None:
        raise InvalidInput(f'unknown denoiser architecture {header["architecture"]!r}')
    denoiser = cls(**header['config'])

    offset = _HEADER_LENGTH.size + length
    state = {}
    for entry in header['parameters']:
        count = int(np.prod(entry['shape'], dtype=np.int64))
        values = np.frombuffer(raw, dtype='<f4', count=count, offset=offset)
        state[entry['name']] = torch.from_numpy(values.copy()).reshape(entry['shape'])
        offset += 4 * count
    if offset != len(raw):
        raise ShapeMismatch(f'{path}: {len(raw) - offset} trailing bytes after parameters')
    denoiser.load_state_dict(state)
    denoiser.is_trained = bool(header['is_trained'])
    denoiser.eval()
    logger.debug(f'Loaded denoiser from {path}: {header["config"]}')
    return denoiser, header


# ---------------------------------------------------------------------------
# Reverse process
# ---------------------------------------------------------------------------

def _predict(denoiser: Denoiser, x: np.ndarray, n: int, c: torch.Tensor, m: torch.Tensor,
             valid: torch.Tensor) -> np.ndarray:
    params = list(denoiser.parameters())
    dtype = params[0].dtype if params else torch.float64
    with torch.no_grad():
        out = denoiser(torch.as_tensor(x, dtype=dtype).unsqueeze(0), torch.tensor([n]),
                       c.to(dtype), m.to(dtype), valid.to(dtype))
    return out[0].detach().cpu().numpy().astype(np.float64)


@log_performance(logger)
def refine(initial: np.ndarray, denoiser: Denoiser, schedule: DiffusionSchedule, start_level: int,
           hand_valid: bool = False, seed: int = 0, eta: float = 0.0) -> np.ndarray:
    """
    Project a captured window (W, 486) onto the learned interaction manifold.

    The condition comes from the initial estimate (hands zero-filled when not
    valid); the full state is noised to ``start_level`` and denoised back to 0
    with posterior means. ``eta`` scales the optional posterior noise.
    """
    if not denoiser.is_trained:
        raise UntrainedDenoiser('denoiser has no trained parameters')
    schedule.check_step(start_level)
    initial = np.asarray(initial, dtype=np.float64)
    if initial.ndim != 2 or initial.shape[1] != STATE_DIM:
        raise ShapeMismatch(f'expected a (W, {STATE_DIM}) window, got {initial.shape}')

    c = torch.as_tensor(initial[:, CONDITION_INDEX]).unsqueeze(0)
    m_values = initial[:, HAND_INDEX] if hand_valid else np.zeros((len(initial), HAND_DIM))
    m = torch.as_tensor(m_values).unsqueeze(0)
    valid = torch.tensor([1.0 if hand_valid else 0.0])
    rng = np.random.default_rng([seed, 1])

    denoiser.eval()
    x = forward_diffuse(initial, start_level, schedule, seed)
    for n in range(start_level, 0, -1):
        x0_hat = _predict(denoiser, x, n, c, m, valid)
        if n == 1:
            x = x0_hat
            break
        coef_x0, coef_xn, variance = schedule.posterior(n)
        x = coef_x0 * x0_hat + coef_xn * x
        if eta > 0:
            x = x + eta * math.sqrt(variance) * rng.standard_normal(x.shape)
    if not np.all(np.isfinite(x)):
        raise InvalidInput('refinement produced non-finite states')
    logger.debug(f'Refined window of {len(initial)} frames from level {start_level}')
    return x


def refine_sequence(states: np.ndarray, denoiser: Denoiser, schedule: DiffusionSchedule, start_level: int,
                    window: int, hand_valid: bool = False, seed: int = 0) -> np.ndarray:
    """Refine a whole sequence window by window; overlapping frames are averaged."""
    states = np.asarray(states, dtype=np.float64)
    total = np.zeros_like(states)
    counts = np.zeros(len(states))
    for k, start in enumerate(window_starts(len(states), window)):
        refined = refine(states[start:start + window], denoiser, schedule, start_level,
                         hand_valid=hand_valid, seed=seed + k)
        total[start:start + window] += refined
        counts[start:start + window] += 1
    return total / counts[:, None]
