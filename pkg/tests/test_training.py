import copy
import os
import sys
from dataclasses import replace

import numpy as np
import pytest
import torch

# Add the repository root to the path for package imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from src.diffusion import DiffusionSchedule, MlpDenoiser
from src.errors import EmptySet, NonFiniteLoss, ShapeMismatch
from src.interaction import STATE_DIM
from src.training import (TrainSettings, active_terms, evaluate_simple, train_category_filters, train_filter,
                          update_ema)

NO_REGULARIZERS = dict(lambda_off=0.0, lambda_vel=0.0, lambda_consist=0.0, lambda_imu=0.0)


def make_model(window=2, hidden=16, seed=0):
    torch.manual_seed(seed)
    return MlpDenoiser(window=window, hidden=hidden, layers=1, embed_dim=8)


def constant_windows(count=1, window=2, seed=0):
    frame = np.random.default_rng(seed).uniform(-0.5, 0.5, STATE_DIM)
    return np.tile(frame, (count, window, 1))


class TestStaging:
    """Which regularizers are active at each epoch"""

    def setup_method(self):
        self.settings = TrainSettings(simple_only_epochs=5, regularizer_warmup_epochs=10)

    def test_simple_only_phase(self):
        assert active_terms(self.settings, 0) == {}
        assert active_terms(self.settings, 4) == {}

    def test_offset_and_velocity_phase(self):
        assert set(active_terms(self.settings, 5)) == {'offset', 'velocity'}
        assert set(active_terms(self.settings, 14)) == {'offset', 'velocity'}

    def test_all_terms_phase(self):
        terms = active_terms(self.settings, 15)
        assert terms == {'offset': 1.0, 'velocity': 1.0, 'consistency': 1.0, 'imu': 100.0}

    def test_zero_weights_are_dropped(self):
        settings = replace(self.settings, lambda_vel=0.0, lambda_imu=0.0)
        assert set(active_terms(settings, 20)) == {'offset', 'consistency'}


class TestEma:
    def test_update_math(self):
        model, ema = make_model(seed=0), make_model(seed=1)
        before = ema.get_flat_parameters().clone()
        update_ema(ema, model, 0.9)
        expected = 0.9 * before + 0.1 * model.get_flat_parameters()
        assert torch.allclose(ema.get_flat_parameters(), expected)

    def test_decay_one_keeps_shadow(self):
        model, ema = make_model(seed=0), make_model(seed=1)
        before = ema.get_flat_parameters().clone()
        update_ema(ema, model, 1.0)
        assert torch.equal(ema.get_flat_parameters(), before)


class TestTrainFilter:
    """Training loop behaviour"""

    def setup_method(self):
        self.schedule = DiffusionSchedule.linear(100)
        self.windows = constant_windows(count=3)

    def test_zero_epochs_leave_parameters(self):
        model = make_model()
        before = model.get_flat_parameters().clone()
        result = train_filter(self.windows, model, self.schedule, TrainSettings(epochs=0, **NO_REGULARIZERS))
        assert torch.equal(model.get_flat_parameters(), before)
        assert result.loss_trace == []
        assert not model.is_trained

    def test_zero_weights_match_simple_only_run(self):
        zero = TrainSettings(epochs=4, batch_size=2, lr=1e-3, **NO_REGULARIZERS)
        simple = TrainSettings(epochs=4, batch_size=2, lr=1e-3, simple_only_epochs=4, lambda_consist=0.0)
        a = train_filter(self.windows, make_model(), self.schedule, zero)
        b = train_filter(self.windows, make_model(), self.schedule, simple)
        assert a.loss_trace == b.loss_trace
        assert torch.equal(a.denoiser.get_flat_parameters(), b.denoiser.get_flat_parameters())

    def test_seeded_runs_are_identical(self):
        settings = TrainSettings(epochs=3, batch_size=2, seed=7, **NO_REGULARIZERS)
        a = train_filter(self.windows, make_model(), self.schedule, settings)
        b = train_filter(self.windows, make_model(), self.schedule, settings)
        assert a.loss_trace == b.loss_trace

    def test_overfits_one_window(self):
        windows = constant_windows(count=1, seed=3)
        model = make_model(hidden=32)
        initial = evaluate_simple(model, windows, self.schedule, 50, seed=1)
        settings = TrainSettings(epochs=300, batch_size=1, lr=1e-2, hand_mask_prob=0.0, **NO_REGULARIZERS)
        result = train_filter(windows, model, self.schedule, settings)
        assert result.denoiser.is_trained
        assert evaluate_simple(result.denoiser, windows, self.schedule, 50, seed=1) < 0.25 * initial

    def test_epoch_losses_record_active_terms(self):
        settings = TrainSettings(epochs=2, batch_size=3, regularizer_warmup_epochs=1, lambda_consist=0.0,
                                 lambda_imu=0.0)
        result = train_filter(self.windows, make_model(), self.schedule, settings)
        assert set(result.epoch_losses[0]) == {'simple', 'offset', 'velocity'}
        assert len(result.loss_trace) == 2

    def test_ema_updated_on_schedule(self):
        model = make_model()
        settings = TrainSettings(epochs=2, batch_size=3, ema_every=2, ema_decay=0.5, **NO_REGULARIZERS)
        start = model.get_flat_parameters().clone()
        result = train_filter(self.windows, model, self.schedule, settings)
        expected = 0.5 * start + 0.5 * result.denoiser.get_flat_parameters()
        assert torch.allclose(result.ema.get_flat_parameters(), expected)
        assert result.ema.is_trained

    def test_non_finite_loss(self):
        windows = self.windows.copy()
        windows[0, 0, 0] = np.nan
        settings = TrainSettings(epochs=1, batch_size=3, **NO_REGULARIZERS)
        with pytest.raises(NonFiniteLoss) as info:
            train_filter(windows, make_model(), self.schedule, settings)
        assert len(info.value.trace) == 1
        assert info.value.diagnostics()['error'] == 'NonFiniteLoss'

    def test_empty_and_malformed_sets(self):
        settings = TrainSettings(epochs=1, **NO_REGULARIZERS)
        with pytest.raises(EmptySet):
            train_filter(np.zeros((0, 2, STATE_DIM)), make_model(), self.schedule, settings)
        with pytest.raises(ShapeMismatch):
            train_filter(np.zeros((2, STATE_DIM)), make_model(), self.schedule, settings)

    def test_consistency_needs_skeleton(self):
        with pytest.raises(ShapeMismatch):
            train_filter(self.windows, make_model(), self.schedule, TrainSettings(epochs=1))


class TestCategoryFilters:
    """Shared warm-up and per-category fine-tuning"""

    def test_one_result_per_category(self):
        schedule = DiffusionSchedule.linear(50)
        datasets = {'box': constant_windows(2, seed=0), 'ball': constant_windows(2, seed=1)}
        settings = TrainSettings(epochs=2, batch_size=2, simple_only_epochs=1, **NO_REGULARIZERS)
        results = train_category_filters(datasets, make_model, schedule, settings)
        assert set(results) == {'ball', 'box'}
        assert results['box'].denoiser is not results['ball'].denoiser
        assert all(r.denoiser.is_trained for r in results.values())
        assert not torch.equal(results['box'].denoiser.get_flat_parameters(),
                               results['ball'].denoiser.get_flat_parameters())

    def test_fine_tune_starts_after_warm_up(self):
        schedule = DiffusionSchedule.linear(50)
        settings = TrainSettings(epochs=1, batch_size=2, simple_only_epochs=3, regularizer_warmup_epochs=0,
                                 lambda_consist=0.0, lambda_imu=0.0)
        results = train_category_filters({'box': constant_windows(2)}, make_model, schedule, settings)
        assert set(results['box'].epoch_losses[0]) == {'simple', 'offset', 'velocity'}

    def test_no_categories(self):
        with pytest.raises(EmptySet):
            train_category_filters({}, make_model, DiffusionSchedule.linear(10), TrainSettings())

    def test_base_model_is_not_mutated_by_fine_tunes(self):
        base = make_model()
        snapshot = copy.deepcopy(base).get_flat_parameters()
        settings = TrainSettings(epochs=1, batch_size=2, **NO_REGULARIZERS)
        train_category_filters({'box': constant_windows(2)}, lambda: base, DiffusionSchedule.linear(10), settings)
        assert torch.equal(base.get_flat_parameters(), snapshot)
