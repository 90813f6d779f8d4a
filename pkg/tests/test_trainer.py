"""Tests for the optimizer step, learning-rate schedule and training loop."""

import math

import numpy as np
import pytest
import torch
from torch import nn

from src.commands import training_pairs
from src.edm import EdmConfig
from src.errors import ArgumentError, ConfigError, TrainingAborted
from src.grid import Grid
from src.network import NetConfig
from src.sampler import GaussianTaskSpec
from src.synth import gen_gaussian_task
from src.trainer import (
    OptimizerState,
    TrainConfig,
    adamw_step,
    cosine_lr,
    read_loss_csv,
    train,
    write_loss_csv,
)

TINY = NetConfig(base_channels=4, multipliers=(2,), embed_dim=16, groups=4, head_dim=8)


class Scalar(nn.Module):
    def __init__(self, value: float) -> None:
        super().__init__()
        self.w = nn.Parameter(torch.tensor([value], dtype=torch.float64))


@pytest.fixture(scope="module")
def dataset():
    grid = Grid(lat0=52.0, lon0=4.0, dlat=-0.05, dlon=0.05, H=16, W=16)
    return gen_gaussian_task(GaussianTaskSpec(grid, 4), count=4, seed=0)


@pytest.fixture(scope="module")
def pairs(dataset):
    return training_pairs(dataset)


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.lr, cfg.weight_decay, cfg.lr_floor) == (1e-4, 1e-5, 1e-5)

    @pytest.mark.parametrize("kwargs", [
        {"steps": 0},
        {"lr": 0.0},
        {"lr_floor": 1e-3},
        {"objective": "gan"},
        {"sigma_fixed": -1.0},
        {"overfit_sigma": 0.0},
        {"overfit_lr_floor": 1e-2},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)


class TestCosineLr:
    def test_endpoints(self):
        assert cosine_lr(0, 100, 1e-4, 1e-5) == pytest.approx(1e-4, abs=1e-15)
        assert cosine_lr(99, 100, 1e-4, 1e-5) == pytest.approx(1e-5, abs=1e-9)

    def test_midpoint(self):
        assert cosine_lr(50, 101, 1.0, 0.0) == pytest.approx(0.5)

    def test_monotone(self):
        lrs = [cosine_lr(s, 50, 1e-4, 1e-5) for s in range(50)]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))


class TestAdamwStep:
    def test_zero_gradient_without_decay_is_a_no_op(self):
        m = Scalar(0.3)
        opt = OptimizerState.create(m, TrainConfig(steps=10, weight_decay=0.0))
        m.w.grad = torch.zeros_like(m.w)
        adamw_step(m, opt, 10)
        assert m.w.item() == 0.3

    def test_first_step_moves_by_lr(self):
        m = Scalar(1.0)
        cfg = TrainConfig(steps=10, lr=1e-3, lr_floor=1e-4, weight_decay=0.0)
        opt = OptimizerState.create(m, cfg)
        m.w.grad = torch.ones_like(m.w)
        lr = adamw_step(m, opt, cfg.steps)
        assert lr == pytest.approx(1e-3)
        assert m.w.item() == pytest.approx(1.0 - 1e-3, abs=1e-8)

    def test_decoupled_weight_decay(self):
        m = Scalar(2.0)
        cfg = TrainConfig(steps=10, lr=1e-2, lr_floor=1e-3, weight_decay=0.1)
        opt = OptimizerState.create(m, cfg)
        m.w.grad = torch.zeros_like(m.w)
        adamw_step(m, opt, cfg.steps)
        assert m.w.item() == pytest.approx(2.0 * (1.0 - 1e-2 * 0.1))

    def test_past_schedule(self):
        m = Scalar(0.0)
        opt = OptimizerState.create(m, TrainConfig(steps=1))
        m.w.grad = torch.zeros_like(m.w)
        adamw_step(m, opt, 1)
        with pytest.raises(ArgumentError):
            adamw_step(m, opt, 1)

    def test_non_finite_gradient_aborts(self):
        m = Scalar(0.0)
        opt = OptimizerState.create(m, TrainConfig(steps=5))
        m.w.grad = torch.tensor([math.nan], dtype=torch.float64)
        with pytest.raises(TrainingAborted) as info:
            adamw_step(m, opt, 5)
        assert info.value.step == 0

    def test_lr_follows_schedule(self):
        m = Scalar(0.0)
        cfg = TrainConfig(steps=4, lr=1e-3, lr_floor=1e-4)
        opt = OptimizerState.create(m, cfg)
        lrs = []
        for _ in range(4):
            m.w.grad = torch.ones_like(m.w)
            lrs.append(adamw_step(m, opt, cfg.steps))
        assert lrs == pytest.approx([cosine_lr(s, 4, 1e-3, 1e-4) for s in range(4)])


class TestTrain:
    def test_trace_and_determinism(self, pairs, dataset):
        cfg = TrainConfig(steps=6, log_every=2)
        a = train(pairs, dataset.statics, TINY, EdmConfig(), cfg, seed=3)
        b = train(pairs, dataset.statics, TINY, EdmConfig(), cfg, seed=3)
        assert [r.step for r in a.trace] == list(range(6))
        assert [r.loss for r in a.trace] == [r.loss for r in b.trace]
        assert all(0.0 <= r.alpha <= 0.8 for r in a.trace)
        sa, sb = a.model.state_dict(), b.model.state_dict()
        assert all(torch.equal(sa[k], sb[k]) for k in sa)

    def test_augmentation_changes_trace_but_not_draws(self, pairs, dataset):
        on = train(pairs, dataset.statics, TINY, EdmConfig(), TrainConfig(steps=5, augment=True), seed=4)
        off = train(pairs, dataset.statics, TINY, EdmConfig(), TrainConfig(steps=5, augment=False), seed=4)
        assert [r.sigma for r in on.trace] == [r.sigma for r in off.trace]
        assert all(r.alpha == 0.0 for r in off.trace)
        assert [r.loss for r in on.trace] != [r.loss for r in off.trace]

    def test_fixed_sigma(self, pairs, dataset):
        result = train(pairs, dataset.statics, TINY, EdmConfig(),
                       TrainConfig(steps=3, sigma_fixed=0.5), seed=0)
        assert all(r.sigma == 0.5 for r in result.trace)

    def test_regression_objective(self, pairs, dataset):
        result = train(pairs, dataset.statics, TINY, EdmConfig(),
                       TrainConfig(steps=3, objective="regression"), seed=0)
        assert all(r.sigma == 1.0 for r in result.trace)
        assert np.isfinite(result.final_loss)

    @pytest.mark.filterwarnings("error:.*not writable.*:UserWarning")
    def test_read_only_fields_train_without_warnings(self, pairs, dataset):
        assert not pairs[0].target.data.flags.writeable
        result = train(pairs, dataset.statics, TINY, EdmConfig(), TrainConfig(steps=2), seed=0)
        assert len(result.trace) == 2

    def test_no_pairs(self, dataset):
        with pytest.raises(ArgumentError):
            train([], dataset.statics, TINY, EdmConfig(), TrainConfig(steps=1), seed=0)

    def test_model_returned_in_eval_mode(self, pairs, dataset):
        result = train(pairs, dataset.statics, TINY, EdmConfig(), TrainConfig(steps=1), seed=0)
        assert not result.model.training
        assert result.model.revision == 1

    def test_overfit_one_pins_sigma_and_disables_augmentation(self, pairs, dataset):
        cfg = TrainConfig(steps=4, overfit_one=True)
        result = train(pairs, dataset.statics, TINY, EdmConfig(), cfg, seed=0)
        assert all(r.sigma == 0.5 and r.alpha == 0.0 for r in result.trace)
        assert result.trace[0].lr == pytest.approx(2e-3)
        assert result.trace[-1].lr == pytest.approx(2e-4)

    def test_fixed_sigma_wins_over_overfit_sigma(self):
        assert TrainConfig(overfit_one=True, sigma_fixed=2.0).pinned_sigma == 2.0
        assert TrainConfig().pinned_sigma is None
        assert TrainConfig().lr_schedule == (1e-4, 1e-5)

    @pytest.mark.slow
    def test_overfits_a_single_pair(self, pairs, dataset):
        cfg = TrainConfig(steps=200, overfit_one=True)
        result = train(pairs, dataset.statics, NetConfig(), EdmConfig(), cfg, seed=0)
        tail = np.mean([r.loss for r in result.trace[-10:]])
        assert tail < 0.1 * result.initial_loss


class TestLossCsv:
    def test_round_trip_and_header(self, tmp_path, pairs, dataset):
        result = train(pairs, dataset.statics, TINY, EdmConfig(), TrainConfig(steps=3), seed=1)
        path = tmp_path / "loss.csv"
        write_loss_csv(path, result.trace)
        assert path.read_text().splitlines()[0] == "step,sigma,alpha,loss,lr"
        assert read_loss_csv(path) == result.trace
