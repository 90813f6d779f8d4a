"""Conditional U-Net denoiser for DeskDownscale.

A 2D encoder-decoder U-Net with Fourier noise embedding, FiLM-modulated
group normalization in every residual block, a single self-attention block at
the bottleneck and standard skip connections. Tensors inside the network are
NCHW; the public helpers (``forward``, ``UNetRawNet``) take and return
channels-last arrays to match the rest of the package.
"""

import math
from dataclasses import asdict, dataclass
from typing import Any, Optional, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeError, StateError
from .utils import get_logger

logger = get_logger(__name__)

GROUP_NORM_EPS = 1e-5

ArrayLike = Union[np.ndarray, torch.Tensor]


@dataclass(frozen=True)
class NetConfig:
    """Architecture hyperparameters (desk-scale defaults)."""

    in_channels: int = 10
    out_channels: int = 4
    base_channels: int = 8
    multipliers: tuple[int, ...] = (2, 4)
    n_res: int = 2
    embed_dim: int = 64
    groups: int = 32
    head_dim: int = 32
    fourier_scale: float = 16.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "multipliers", tuple(int(m) for m in self.multipliers))
        if not self.multipliers:
            raise ConfigError("multipliers must be non-empty")
        ints = {
            "in_channels": self.in_channels, "out_channels": self.out_channels,
            "base_channels": self.base_channels, "n_res": self.n_res,
            "embed_dim": self.embed_dim, "groups": self.groups, "head_dim": self.head_dim,
        }
        bad = [k for k, v in ints.items() if int(v) < 1]
        if bad or min(self.multipliers) < 1 or not self.fourier_scale > 0:
            raise ConfigError(f"Network settings must be positive: {bad or 'multipliers/fourier_scale'}")
        if self.embed_dim % 2:
            raise ConfigError(f"Noise embedding dimension must be even, got {self.embed_dim}")

    @property
    def n_stages(self) -> int:
        return len(self.multipliers)

    @property
    def stage_widths(self) -> list[int]:
        return [self.base_channels * m for m in self.multipliers]

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["multipliers"] = list(self.multipliers)
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "NetConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown network settings: {sorted(unknown)}")
        return cls(**data)


def group_count(channels: int, groups: int) -> int:
    """
    Largest group count <= min(groups, channels) that divides channels.

    Args:
        channels: Feature channels
        groups: Requested group count

    Returns:
        Group count for GroupNorm
    """
    g = max(1, min(groups, channels))
    while channels % g:
        g -= 1
    return g


def head_count(channels: int, head_dim: int) -> int:
    """Attention heads of roughly head_dim channels each, dividing channels."""
    heads = max(1, channels // head_dim)
    while channels % heads:
        heads -= 1
    return heads


def fourier_embed(c_noise: torch.Tensor, freqs: torch.Tensor) -> torch.Tensor:
    """
    Fourier features [sin(2 pi f c), cos(2 pi f c)].

    Args:
        c_noise: Noise conditioning values, shape (B,)
        freqs: Fixed frequencies, shape (d/2,)

    Returns:
        Embedding of shape (B, d)
    """
    angles = torch.outer(c_noise.to(freqs.dtype), 2.0 * math.pi * freqs)
    return torch.cat([angles.sin(), angles.cos()], dim=1)


def film_modulate(x: torch.Tensor, a: torch.Tensor, b: torch.Tensor, norm: nn.GroupNorm) -> torch.Tensor:
    """
    Group-normalize then apply (1 + a) * GN(x) + b, broadcast over space.

    Args:
        x: Features (B, C, H, W)
        a: Scale offsets (B, C)
        b: Shifts (B, C)
        norm: GroupNorm layer over C channels

    Returns:
        Modulated features
    """
    channels = x.shape[1]
    if a.shape[-1] != channels or b.shape[-1] != channels:
        raise ShapeError(
            f"FiLM parameters of length {a.shape[-1]}/{b.shape[-1]} for {channels} channels"
        )
    return (1.0 + a[:, :, None, None]) * norm(x) + b[:, :, None, None]


class FourierEmbedding(nn.Module):
    """Random Fourier features of c_noise; frequencies are fixed at init."""

    def __init__(self, dim: int, scale: float) -> None:
        super().__init__()
        self.register_buffer("freqs", torch.randn(dim // 2) * scale)

    def forward(self, c_noise: torch.Tensor) -> torch.Tensor:
        return fourier_embed(c_noise, self.freqs)


class ResBlock(nn.Module):
    """GN-FiLM-SiLU-Conv twice, with a 1x1 projection when widths differ."""

    def __init__(self, in_ch: int, out_ch: int, embed_dim: int, groups: int) -> None:
        super().__init__()
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.norm1 = nn.GroupNorm(group_count(in_ch, groups), in_ch, eps=GROUP_NORM_EPS)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(group_count(out_ch, groups), out_ch, eps=GROUP_NORM_EPS)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.film = nn.Linear(embed_dim, 2 * in_ch + 2 * out_ch)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        a1, b1, a2, b2 = torch.split(
            self.film(emb), [self.in_ch, self.in_ch, self.out_ch, self.out_ch], dim=1
        )
        h = self.conv1(F.silu(film_modulate(x, a1, b1, self.norm1)))
        h = self.conv2(F.silu(film_modulate(h, a2, b2, self.norm2)))
        return self.skip(x) + h


class AttentionBlock(nn.Module):
    """Pre-norm multi-head self-attention over all spatial positions."""

    def __init__(self, channels: int, head_dim: int, groups: int) -> None:
        super().__init__()
        self.norm = nn.GroupNorm(group_count(channels, groups), channels, eps=GROUP_NORM_EPS)
        self.attn = nn.MultiheadAttention(channels, head_count(channels, head_dim), batch_first=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, C, H, W = x.shape
        tokens = self.norm(x).reshape(B, C, H * W).transpose(1, 2)
        mixed, _ = self.attn(tokens, tokens, tokens, need_weights=False)
        return x + mixed.transpose(1, 2).reshape(B, C, H, W)


class Upsample(nn.Module):
    """Bilinear x2 followed by a 3x3 convolution."""

    def __init__(self, in_ch: int, out_ch: int) -> None:
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False))


class DownscalingUNet(nn.Module):
    """
    FiLM-conditioned U-Net F_theta(x, c_noise).

    The final convolution is zero-initialized, so the wrapped denoiser equals
    c_skip * u_noisy before training.
    """

    def __init__(self, cfg: NetConfig) -> None:
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        widths = cfg.stage_widths

        self.embed = FourierEmbedding(d, cfg.fourier_scale)
        self.trunk = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d), nn.SiLU())
        self.in_conv = nn.Conv2d(cfg.in_channels, cfg.base_channels, 3, padding=1)

        self.enc_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        ch = cfg.base_channels
        for width in widths:
            blocks = nn.ModuleList()
            for _ in range(cfg.n_res):
                blocks.append(ResBlock(ch, width, d, cfg.groups))
                ch = width
            self.enc_blocks.append(blocks)
            self.downs.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))

        self.mid_in = ResBlock(ch, ch, d, cfg.groups)
        self.mid_attn = AttentionBlock(ch, cfg.head_dim, cfg.groups)
        self.mid_out = ResBlock(ch, ch, d, cfg.groups)

        self.ups = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        for width in reversed(widths):
            self.ups.append(Upsample(ch, width))
            blocks = nn.ModuleList([ResBlock(2 * width, width, d, cfg.groups)])
            for _ in range(cfg.n_res - 1):
                blocks.append(ResBlock(width, width, d, cfg.groups))
            self.dec_blocks.append(blocks)
            ch = width

        self.out_norm = nn.GroupNorm(group_count(ch, cfg.groups), ch, eps=GROUP_NORM_EPS)
        self.out_conv = nn.Conv2d(ch, cfg.out_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

        # bumped on every optimizer update; activation records compare against it
        self.revision = 0

    def forward(self, x: torch.Tensor, c_noise: torch.Tensor) -> torch.Tensor:
        B, C, H, W = x.shape
        factor = 2 ** self.cfg.n_stages
        if C != self.cfg.in_channels:
            raise ShapeError(f"Expected {self.cfg.in_channels} input channels, got {C}")
        if H % factor or W % factor:
            raise ShapeError(f"Grid {H}x{W} is not divisible by {factor}")

        emb = self.trunk(self.embed(c_noise.reshape(-1).expand(B)))

        h = self.in_conv(x)
        skips = []
        for blocks, down in zip(self.enc_blocks, self.downs):
            for block in blocks:
                h = block(h, emb)
            skips.append(h)
            h = down(h)

        h = self.mid_out(self.mid_attn(self.mid_in(h, emb)), emb)

        for up, blocks in zip(self.ups, self.dec_blocks):
            h = torch.cat([up(h), skips.pop()], dim=1)
            for block in blocks:
                h = block(h, emb)

        return self.out_conv(F.silu(self.out_norm(h)))


def build_model(cfg: NetConfig, seed: int, dtype: torch.dtype = torch.float32) -> DownscalingUNet:
    """
    Instantiate a model with a reproducible initialization.

    Args:
        cfg: Network configuration
        seed: Initialization seed
        dtype: Parameter dtype

    Returns:
        The model
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = DownscalingUNet(cfg)
    return model.to(dtype)


def count_parameters(cfg: NetConfig) -> int:
    """Trainable parameter count of a configuration."""
    with torch.random.fork_rng(devices=[]):
        model = DownscalingUNet(cfg)
    return sum(p.numel() for p in model.parameters())


def _as_tensor(x: ArrayLike, dtype: torch.dtype) -> torch.Tensor:
    # torch cannot share memory with a read-only array
    if isinstance(x, np.ndarray) and not x.flags.writeable:
        x = x.copy()
    return torch.as_tensor(x).to(dtype)


def _to_nchw(x: ArrayLike, dtype: torch.dtype) -> tuple[torch.Tensor, bool]:
    tensor = _as_tensor(x, dtype)
    batched = tensor.dim() == 4
    if not batched:
        tensor = tensor.unsqueeze(0)
    return tensor.permute(0, 3, 1, 2), batched


def _from_nchw(y: torch.Tensor, batched: bool) -> torch.Tensor:
    y = y.permute(0, 2, 3, 1)
    return y if batched else y.squeeze(0)


@dataclass
class ActivationRecord:
    """Graph of one recorded forward pass, consumed by backward."""

    output: torch.Tensor
    sigma: float
    revision: int
    consumed: bool = False


def forward(model: DownscalingUNet, x: ArrayLike, sigma: float,
            record: bool = False) -> tuple[torch.Tensor, Optional[ActivationRecord]]:
    """
    Run the raw network on a concatenated channels-last input.

    Args:
        model: The U-Net
        x: Input (H, W, in_channels) or (B, H, W, in_channels)
        sigma: Noise level; the network sees c_noise = ln(sigma) / 4
        record: Keep the autograd graph for a later backward call

    Returns:
        Tuple of (channels-last output, activation record or None)
    """
    dtype = next(model.parameters()).dtype
    inputs, batched = _to_nchw(x, dtype)
    c_noise = torch.tensor(0.25 * math.log(sigma), dtype=dtype)

    with torch.set_grad_enabled(record):
        output = _from_nchw(model(inputs, c_noise), batched)

    if not record:
        return output, None
    return output, ActivationRecord(output=output, sigma=sigma, revision=model.revision)


def backward(model: DownscalingUNet, record: Optional[ActivationRecord],
             upstream: ArrayLike) -> dict[str, torch.Tensor]:
    """
    Reverse-mode gradients of sum(upstream * output) for every parameter.

    Gradients are written to each parameter's ``.grad`` buffer (replacing
    earlier contents) and returned by name.

    Args:
        model: The U-Net that produced the record
        record: Activation record from forward(..., record=True)
        upstream: dLoss/dOutput, shaped like the recorded output

    Returns:
        Mapping of parameter name to gradient tensor

    Raises:
        StateError: If the record is missing, already consumed, or stale
    """
    if record is None:
        raise StateError("No forward activations recorded")
    if record.consumed:
        raise StateError("Activation record was already consumed by a backward pass")
    if record.revision != model.revision:
        raise StateError(
            f"Activation record is stale (recorded at revision {record.revision}, "
            f"parameters at {model.revision})"
        )

    grad_out = _as_tensor(upstream, record.output.dtype)
    if grad_out.shape != record.output.shape:
        raise ShapeError(f"Upstream gradient {tuple(grad_out.shape)} vs output {tuple(record.output.shape)}")

    model.zero_grad(set_to_none=False)
    record.output.backward(grad_out)
    record.consumed = True

    return {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }


class UNetRawNet:
    """
    Adapter exposing the U-Net as raw_net(scaled_noisy, cond, c_noise).

    Channels-last numpy inputs run without autograd and return float64
    numpy; torch inputs keep the graph for training.
    """

    def __init__(self, model: DownscalingUNet) -> None:
        self.model = model

    def __call__(self, scaled_noisy: ArrayLike, cond: ArrayLike, c_noise: float) -> ArrayLike:
        dtype = next(self.model.parameters()).dtype
        as_numpy = isinstance(scaled_noisy, np.ndarray)

        noisy = _as_tensor(scaled_noisy, dtype)
        cond_t = _as_tensor(cond, dtype)
        if cond_t.dim() < noisy.dim():
            cond_t = cond_t.expand(*noisy.shape[:-1], cond_t.shape[-1])

        x, batched = _to_nchw(torch.cat([noisy, cond_t], dim=-1), dtype)
        c = torch.tensor(c_noise, dtype=dtype)

        if as_numpy:
            with torch.no_grad():
                y = self.model(x, c)
            return _from_nchw(y, batched).to(torch.float64).numpy()
        return _from_nchw(self.model(x, c), batched)
