"""Tests for the conditional U-Net and its gradient plumbing."""

import numpy as np
import pytest
import torch
from torch import nn

from src.edm import denoise, precond_coeffs
from src.errors import ConfigError, ShapeError, StateError
from src.network import (
    NetConfig,
    UNetRawNet,
    backward,
    build_model,
    count_parameters,
    film_modulate,
    forward,
    fourier_embed,
    group_count,
    head_count,
)

SMALL = NetConfig(base_channels=4, multipliers=(2, 4), embed_dim=16, groups=4, head_dim=8)


@pytest.fixture(scope="module")
def model():
    return build_model(SMALL, seed=0)


class TestNetConfig:
    def test_defaults(self):
        cfg = NetConfig()
        assert cfg.in_channels == 10 and cfg.out_channels == 4
        assert cfg.stage_widths == [16, 32]

    def test_odd_embedding_dimension(self):
        with pytest.raises(ConfigError):
            NetConfig(embed_dim=15)

    def test_non_positive_settings(self):
        with pytest.raises(ConfigError):
            NetConfig(base_channels=0)
        with pytest.raises(ConfigError):
            NetConfig(multipliers=())

    def test_dict_round_trip(self):
        assert NetConfig.from_dict(SMALL.to_dict()) == SMALL

    def test_unknown_keys(self):
        with pytest.raises(ConfigError):
            NetConfig.from_dict({"depth": 3})


class TestHelpers:
    def test_group_count_divides(self):
        assert group_count(8, 32) == 8
        assert group_count(48, 32) == 24
        assert group_count(6, 4) == 3

    def test_head_count(self):
        assert head_count(32, 32) == 1
        assert head_count(96, 32) == 3
        assert head_count(8, 32) == 1

    def test_fourier_embed_range_and_zero(self):
        freqs = torch.randn(8, generator=torch.Generator().manual_seed(0)) * 16
        emb = fourier_embed(torch.tensor([-1.2, 0.0, 3.0]), freqs)
        assert emb.shape == (3, 16)
        assert torch.all(emb.abs() <= 1.0)
        assert torch.all(emb[1, :8] == 0.0) and torch.all(emb[1, 8:] == 1.0)
        assert torch.equal(fourier_embed(torch.tensor([0.4]), freqs), fourier_embed(torch.tensor([0.4]), freqs))

    def test_film_identity_and_affine(self):
        torch.manual_seed(0)
        norm = nn.GroupNorm(2, 4)
        x = torch.randn(1, 4, 5, 5) * 3 + 1
        zeros = torch.zeros(1, 4)
        y = film_modulate(x, zeros, zeros, norm)
        assert torch.allclose(y, norm(x))
        grouped = y.reshape(1, 2, -1)
        assert torch.allclose(grouped.mean(-1), torch.zeros(1, 2), atol=1e-5)
        assert torch.allclose(grouped.var(-1, unbiased=False), torch.ones(1, 2), atol=1e-4)
        shifted = film_modulate(x, torch.ones(1, 4), torch.full((1, 4), 3.0), norm)
        assert torch.allclose(shifted, 2 * y + 3, atol=1e-6)

    def test_film_length_mismatch(self):
        norm = nn.GroupNorm(2, 4)
        with pytest.raises(ShapeError):
            film_modulate(torch.randn(1, 4, 3, 3), torch.zeros(1, 3), torch.zeros(1, 4), norm)


class TestForward:
    def test_output_shape(self, model, rng):
        x = rng.standard_normal((8, 8, 10))
        out, record = forward(model, x, 1.0)
        assert out.shape == (8, 8, 4)
        assert record is None

    def test_batched_output_shape(self, model, rng):
        out, _ = forward(model, rng.standard_normal((3, 8, 8, 10)), 0.5)
        assert out.shape == (3, 8, 8, 4)

    def test_zero_initialized_output(self, model, rng):
        out, _ = forward(model, rng.standard_normal((8, 8, 10)), 2.0)
        assert torch.all(out == 0.0)

    def test_denoiser_is_skip_path_at_init(self, model, rng):
        x = rng.standard_normal((8, 8, 4))
        cond = rng.standard_normal((8, 8, 6))
        d = denoise(UNetRawNet(model), x, cond, 0.8)
        assert np.allclose(d, precond_coeffs(0.8).c_skip * x, atol=1e-7)

    def test_indivisible_grid(self, model, rng):
        with pytest.raises(ShapeError):
            forward(model, rng.standard_normal((6, 6, 10)), 1.0)

    def test_wrong_channel_count(self, model, rng):
        with pytest.raises(ShapeError):
            forward(model, rng.standard_normal((8, 8, 9)), 1.0)

    def test_deterministic_and_finite(self, rng):
        m = build_model(SMALL, seed=1)
        nn.init.normal_(m.out_conv.weight, std=0.1)
        for _ in range(100):
            x = rng.uniform(-10, 10, (8, 8, 10))
            a, _ = forward(m, x, 3.0)
            b, _ = forward(m, x, 3.0)
            assert torch.equal(a, b)
            assert torch.all(torch.isfinite(a))


class TestModelConstruction:
    def test_same_seed_same_parameters(self):
        a = build_model(SMALL, seed=5).state_dict()
        b = build_model(SMALL, seed=5).state_dict()
        assert all(torch.equal(a[k], b[k]) for k in a)

    def test_parameter_count_matches_model(self):
        m = build_model(SMALL, seed=0)
        assert count_parameters(SMALL) == sum(p.numel() for p in m.parameters())

    def test_parameter_count_grows_with_width(self):
        assert count_parameters(NetConfig(base_channels=16)) > count_parameters(NetConfig(base_channels=8))


class TestBackward:
    def _recorded(self, rng, seed=2):
        m = build_model(SMALL, seed=seed, dtype=torch.float64)
        nn.init.normal_(m.out_conv.weight, std=0.1)
        x = rng.standard_normal((8, 8, 10))
        return m, x

    def test_missing_record(self, model):
        with pytest.raises(StateError):
            backward(model, None, np.zeros((8, 8, 4)))

    def test_record_consumed_once(self, rng):
        m, x = self._recorded(rng)
        out, record = forward(m, x, 1.0, record=True)
        backward(m, record, np.ones(out.shape))
        with pytest.raises(StateError):
            backward(m, record, np.ones(out.shape))

    def test_stale_record(self, rng):
        m, x = self._recorded(rng)
        out, record = forward(m, x, 1.0, record=True)
        m.revision += 1
        with pytest.raises(StateError):
            backward(m, record, np.ones(out.shape))

    def test_linear_in_upstream(self, rng):
        m, x = self._recorded(rng)
        upstream = rng.standard_normal((8, 8, 4))
        out, rec = forward(m, x, 1.0, record=True)
        g1 = backward(m, rec, upstream)
        out, rec = forward(m, x, 1.0, record=True)
        g2 = backward(m, rec, 2.0 * upstream)
        for name in g1:
            assert torch.allclose(g2[name], 2.0 * g1[name], rtol=1e-10, atol=1e-14)

    def test_unused_parameter_has_zero_gradient(self, rng):
        m, x = self._recorded(rng)
        out, rec = forward(m, x, 1.0, record=True)
        # upstream only on channel 0
        upstream = np.zeros((8, 8, 4))
        upstream[:, :, 0] = 1.0
        grads = backward(m, rec, upstream)
        assert torch.all(grads["out_conv.bias"][1:] == 0.0)
        assert grads["out_conv.bias"][0].item() == pytest.approx(64.0)

    def test_matches_finite_differences(self, rng):
        m, x = self._recorded(rng)
        upstream = rng.standard_normal((8, 8, 4))

        def objective() -> float:
            out, _ = forward(m, x, 0.7)
            return float((out * torch.as_tensor(upstream)).sum())

        _, rec = forward(m, x, 0.7, record=True)
        grads = backward(m, rec, upstream)
        h = 1e-5
        param = dict(m.named_parameters())["enc_blocks.0.0.conv1.weight"]
        for idx in [(0, 0, 0, 0), (1, 2, 1, 2), (7, 3, 2, 0)]:
            with torch.no_grad():
                orig = param[idx].item()
                param[idx] = orig + h
                up = objective()
                param[idx] = orig - h
                down = objective()
                param[idx] = orig
            fd = (up - down) / (2 * h)
            assert grads["enc_blocks.0.0.conv1.weight"][idx].item() == pytest.approx(fd, rel=1e-5, abs=1e-8)


class TestUNetRawNet:
    def test_numpy_in_numpy_out(self, model, rng):
        raw = UNetRawNet(model)
        out = raw(rng.standard_normal((8, 8, 4)), rng.standard_normal((8, 8, 6)), 0.0)
        assert isinstance(out, np.ndarray) and out.dtype == np.float64
        assert out.shape == (8, 8, 4)

    def test_conditioning_broadcast_over_batch(self, rng):
        m = build_model(SMALL, seed=3)
        nn.init.normal_(m.out_conv.weight, std=0.1)
        raw = UNetRawNet(m)
        x = rng.standard_normal((2, 8, 8, 4))
        cond = rng.standard_normal((8, 8, 6))
        batched = raw(x, cond, 0.1)
        single = raw(x[1], cond, 0.1)
        assert np.allclose(batched[1], single, atol=1e-5)

    def test_torch_input_keeps_graph(self, model):
        raw = UNetRawNet(model)
        x = torch.zeros(8, 8, 4)
        out = raw(x, torch.zeros(8, 8, 6), 0.0)
        assert isinstance(out, torch.Tensor) and out.requires_grad

    @pytest.mark.filterwarnings("error:.*not writable.*:UserWarning")
    def test_read_only_inputs(self, model, rng):
        x = rng.standard_normal((8, 8, 4))
        cond = rng.standard_normal((8, 8, 6))
        x.flags.writeable = False
        cond.flags.writeable = False
        out = UNetRawNet(model)(x, cond, 0.0)
        assert out.shape == (8, 8, 4)
        assert not x.flags.writeable
