import os
import sys

import numpy as np
import pytest
import torch

# Add the repository root to the path for package imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from src.diffusion import (Denoiser, DiffusionSchedule, MlpDenoiser, forward_diffuse, forward_step, load_denoiser,
                           q_sample, refine, refine_sequence, save_denoiser, step_embedding)
from src.errors import InvalidInput, MissingArtifact, ShapeMismatch, StepOutOfRange, UntrainedDenoiser
from src.interaction import HAND_INDEX, STATE_DIM


class OracleDenoiser(Denoiser):
    """Predicts a fixed clean window regardless of its input."""

    def __init__(self, clean):
        super().__init__()
        self.clean = torch.as_tensor(clean, dtype=torch.float64)
        self.is_trained = True

    def forward(self, x_n, steps, c, m, hand_valid):
        return self.clean.expand(x_n.shape[0], -1, -1).to(x_n.dtype)


class HandlessDenoiser(Denoiser):
    """Projects its input onto states without hand motion."""

    def __init__(self):
        super().__init__()
        self.is_trained = True

    def forward(self, x_n, steps, c, m, hand_valid):
        out = x_n.clone()
        out[..., HAND_INDEX] = 0.0
        return out


class TestSchedule:
    """Noise schedules"""

    def setup_method(self):
        self.schedule = DiffusionSchedule.linear(1000, 1e-4, 2e-2)

    def test_linear_endpoints(self):
        assert self.schedule.steps == 1000
        assert self.schedule.betas[0] == pytest.approx(1e-4)
        assert self.schedule.betas[-1] == pytest.approx(2e-2)

    def test_alpha_bar_decreases(self):
        bars = self.schedule.alpha_bars
        assert np.all(np.diff(bars) < 0)
        assert self.schedule.alpha_bar(1) == pytest.approx(1.0 - 1e-4)

    def test_cosine_betas_valid(self):
        cosine = DiffusionSchedule.cosine(200)
        assert np.all((cosine.betas > 0) & (cosine.betas < 1))
        assert cosine.describe()['kind'] == 'cosine'

    def test_invalid_betas(self):
        with pytest.raises(InvalidInput):
            DiffusionSchedule(np.array([0.1, 1.0]))

    def test_step_range(self):
        with pytest.raises(StepOutOfRange):
            self.schedule.alpha_bar(0)
        with pytest.raises(StepOutOfRange):
            self.schedule.alpha_bar(1001)
        with pytest.raises(StepOutOfRange):
            self.schedule.posterior(1)

    def test_posterior_mean_of_noise_free_input(self):
        for n in (2, 50, 999):
            coef_x0, coef_xn, variance = self.schedule.posterior(n)
            expected = np.sqrt(self.schedule.alpha_bar(n - 1))
            assert coef_x0 + coef_xn * np.sqrt(self.schedule.alpha_bar(n)) == pytest.approx(expected)
            assert 0 < variance < self.schedule.betas[n - 1]

    def test_digest_tracks_betas(self):
        assert self.schedule.digest == DiffusionSchedule.linear(1000, 1e-4, 2e-2).digest
        assert self.schedule.digest != DiffusionSchedule.linear(999, 1e-4, 2e-2).digest


class TestForwardProcess:
    """Forward noising"""

    def setup_method(self):
        self.schedule = DiffusionSchedule.linear(1000)

    def test_marginal_statistics(self):
        x = forward_diffuse(np.zeros((200, STATE_DIM)), 1000, self.schedule, seed=0)
        assert abs(x.mean()) < 0.02
        assert x.var() == pytest.approx(1.0 - self.schedule.alpha_bar(1000), rel=0.02)

    def test_scales_clean_signal(self):
        x0 = np.full((50, STATE_DIM), 2.0)
        x = forward_diffuse(x0, 10, self.schedule, seed=1)
        assert x.mean() == pytest.approx(2.0 * np.sqrt(self.schedule.alpha_bar(10)), abs=0.01)

    def test_seeded(self):
        x0 = np.ones((3, STATE_DIM))
        assert np.array_equal(forward_diffuse(x0, 5, self.schedule, 7), forward_diffuse(x0, 5, self.schedule, 7))

    def test_bad_step(self):
        with pytest.raises(StepOutOfRange):
            forward_diffuse(np.zeros((2, STATE_DIM)), 0, self.schedule, 0)
        with pytest.raises(StepOutOfRange):
            forward_step(np.zeros(3), 1001, self.schedule, np.random.default_rng(0))

    def test_single_transition_variance(self):
        rng = np.random.default_rng(2)
        x = forward_step(np.zeros(100000), 1000, self.schedule, rng)
        assert x.var() == pytest.approx(self.schedule.betas[-1], rel=0.03)

    def test_torch_sampling_matches_formula(self):
        x0 = torch.randn(4, 2, STATE_DIM, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
        noise = torch.randn_like(x0)
        steps = torch.tensor([1, 10, 100, 1000])
        x = q_sample(x0, steps, self.schedule, noise)
        bar = self.schedule.alpha_bar(100)
        assert torch.allclose(x[2], np.sqrt(bar) * x0[2] + np.sqrt(1.0 - bar) * noise[2])


class TestDenoisers:
    """Reference MLP and file format"""

    def setup_method(self):
        self.schedule = DiffusionSchedule.linear(50)
        self.model = MlpDenoiser(window=2, hidden=8, layers=1, embed_dim=4)

    def test_output_starts_at_zero(self):
        x = torch.randn(3, 2, STATE_DIM)
        out = self.model(x, torch.tensor([1, 2, 3]), torch.zeros(3, 2, 216), torch.zeros(3, 2, 270),
                         torch.ones(3))
        assert out.shape == (3, 2, STATE_DIM)
        assert torch.all(out == 0)

    def test_window_checked(self):
        with pytest.raises(ShapeMismatch):
            self.model(torch.zeros(1, 3, STATE_DIM), torch.tensor([1]), torch.zeros(1, 3, 216),
                       torch.zeros(1, 3, 270), torch.ones(1))

    def test_flat_parameters(self):
        flat = self.model.get_flat_parameters()
        self.model.set_flat_parameters(torch.ones_like(flat))
        assert torch.all(self.model.get_flat_parameters() == 1)
        with pytest.raises(ShapeMismatch):
            self.model.set_flat_parameters(torch.ones(3))

    def test_step_embedding_shape(self):
        assert step_embedding(torch.tensor([1, 5]), 7).shape == (2, 7)

    def test_save_and_load(self, tmp_path):
        torch.manual_seed(0)
        for p in self.model.parameters():
            torch.nn.init.normal_(p)
        self.model.is_trained = True
        path = tmp_path / 'filter' / 'denoiser.bin'
        save_denoiser(path, self.model, self.schedule, seed=3, extra={'category': 'box'})
        loaded, header = load_denoiser(path)
        assert loaded.is_trained
        assert header['seed'] == 3 and header['category'] == 'box'
        assert header['schedule']['digest'] == self.schedule.digest
        assert torch.equal(loaded.get_flat_parameters(), self.model.get_flat_parameters())

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingArtifact):
            load_denoiser(tmp_path / 'nothing.bin')

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / 'denoiser.bin'
        save_denoiser(path, self.model, self.schedule)
        with open(path, 'ab') as f:
            f.write(b'\x00\x00\x00\x00')
        with pytest.raises(ShapeMismatch):
            load_denoiser(path)

    def test_foreign_file(self, tmp_path):
        path = tmp_path / 'other.bin'
        header = b'{"format": "other"}'
        path.write_bytes(len(header).to_bytes(8, 'little') + header)
        with pytest.raises(InvalidInput):
            load_denoiser(path)


class TestRefine:
    """Reverse process from a partially noised capture"""

    def setup_method(self):
        self.schedule = DiffusionSchedule.linear(100)
        rng = np.random.default_rng(0)
        self.clean = rng.normal(size=(4, STATE_DIM))
        self.captured = self.clean + 0.1 * rng.normal(size=(4, STATE_DIM))

    def test_oracle_recovers_clean_window_from_any_level(self):
        oracle = OracleDenoiser(self.clean)
        for level in (1, 2, 10, 100):
            assert np.allclose(refine(self.captured, oracle, self.schedule, level, seed=level), self.clean)

    def test_projection_lands_in_subspace(self):
        out = refine(self.captured, HandlessDenoiser(), self.schedule, 30, seed=1)
        assert np.all(out[:, HAND_INDEX] == 0.0)
        assert np.all(np.isfinite(out))

    def test_zero_initialized_mlp_outputs_zeros(self):
        model = MlpDenoiser(window=4, hidden=8, layers=1, embed_dim=4)
        model.is_trained = True
        out = refine(self.captured, model, self.schedule, 20)
        assert np.allclose(out, 0.0)

    def test_untrained_denoiser(self):
        with pytest.raises(UntrainedDenoiser):
            refine(self.captured, MlpDenoiser(window=4, hidden=8, layers=1), self.schedule, 10)

    def test_start_level_range(self):
        with pytest.raises(StepOutOfRange):
            refine(self.captured, OracleDenoiser(self.clean), self.schedule, 101)

    def test_window_shape(self):
        with pytest.raises(ShapeMismatch):
            refine(self.captured[:, :100], OracleDenoiser(self.clean), self.schedule, 10)

    def test_deterministic(self):
        model = HandlessDenoiser()
        a = refine(self.captured, model, self.schedule, 30, seed=5, eta=1.0)
        b = refine(self.captured, model, self.schedule, 30, seed=5, eta=1.0)
        assert np.array_equal(a, b)

    def test_sequence_covers_trailing_frames(self):
        states = np.random.default_rng(1).normal(size=(10, STATE_DIM))
        out = refine_sequence(states, HandlessDenoiser(), self.schedule, 1, window=4, seed=0)
        assert out.shape == states.shape
        assert np.all(out[:, HAND_INDEX] == 0.0)
        assert np.all(np.isfinite(out))
