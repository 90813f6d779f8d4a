"""EDM preconditioning and denoising objective for DeskDownscale.

Scalar coefficient math is evaluated in float64. The array functions are
layout-agnostic arithmetic over channels-last arrays (``(..., H, W, C)``) and
accept numpy arrays or torch tensors alike, so the same code drives the
training loss (torch, with autograd) and the samplers (numpy).
"""

import math
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from .errors import ArgumentError, ConfigError, ShapeError

# Clamp range for training noise draws
TRAIN_SIGMA_MIN = 1e-4
TRAIN_SIGMA_MAX = 1e3

# raw_net(scaled_noisy, cond, c_noise) -> network output, channels-last
RawNet = Callable[[Any, Any, float], Any]


@dataclass(frozen=True)
class EdmConfig:
    """EDM data scale and log-normal training-noise parameters."""

    sigma_data: float = 0.5
    p_mean: float = -0.5
    p_std: float = 1.5

    def __post_init__(self) -> None:
        if not self.sigma_data > 0:
            raise ConfigError(f"sigma_data must be > 0, got {self.sigma_data}")
        if not self.p_std > 0:
            raise ConfigError(f"p_std must be > 0, got {self.p_std}")


@dataclass(frozen=True)
class PrecondCoeffs:
    """The four preconditioning coefficients at one noise level."""

    c_skip: float
    c_out: float
    c_in: float
    c_noise: float


def _check_sigma(sigma: float) -> float:
    sigma = float(sigma)
    if not (math.isfinite(sigma) and sigma > 0):
        raise ArgumentError(f"Noise level must be positive and finite, got {sigma}")
    return sigma


def _check_same_grid(a: Any, b: Any) -> None:
    # trailing (H, W) only; a leading batch axis may be broadcast
    if tuple(a.shape[-3:-1]) != tuple(b.shape[-3:-1]):
        raise ArgumentError(f"Grid mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def precond_coeffs(sigma: float, cfg: EdmConfig = EdmConfig()) -> PrecondCoeffs:
    """
    Preconditioning coefficients c_skip, c_out, c_in, c_noise.

    Args:
        sigma: Noise level > 0
        cfg: EDM configuration

    Returns:
        PrecondCoeffs
    """
    sigma = _check_sigma(sigma)
    sd2 = cfg.sigma_data ** 2
    total = sigma * sigma + sd2
    return PrecondCoeffs(
        c_skip=sd2 / total,
        c_out=sigma * cfg.sigma_data / math.sqrt(total),
        c_in=1.0 / math.sqrt(total),
        c_noise=0.25 * math.log(sigma),
    )


def loss_weight(sigma: float, cfg: EdmConfig = EdmConfig()) -> float:
    """Effective weighting w(sigma) = (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2."""
    sigma = _check_sigma(sigma)
    return (sigma * sigma + cfg.sigma_data ** 2) / (sigma * cfg.sigma_data) ** 2


def sample_train_sigma(rng: np.random.Generator, cfg: EdmConfig = EdmConfig()) -> float:
    """
    Training noise level with ln(sigma) ~ N(p_mean, p_std^2).

    Draws are clamped to [1e-4, 1e3].
    """
    log_sigma = rng.normal(cfg.p_mean, cfg.p_std)
    return float(np.clip(math.exp(log_sigma), TRAIN_SIGMA_MIN, TRAIN_SIGMA_MAX))


def denoise(raw_net: RawNet, u_noisy: Any, cond: Any, sigma: float,
            cfg: EdmConfig = EdmConfig()) -> Any:
    """
    Preconditioned denoiser D = c_skip * x + c_out * F(c_in * x, cond; c_noise).

    Args:
        raw_net: Raw network callable (scaled_noisy, cond, c_noise) -> output
        u_noisy: Noisy state, channels-last
        cond: Conditioning on the same grid, channels-last
        sigma: Noise level
        cfg: EDM configuration

    Returns:
        Denoised estimate with the shape of u_noisy
    """
    _check_same_grid(u_noisy, cond)
    c = precond_coeffs(sigma, cfg)
    return c.c_skip * u_noisy + c.c_out * raw_net(c.c_in * u_noisy, cond, c.c_noise)


def f_target(u: Any, u_noisy: Any, sigma: float, cfg: EdmConfig = EdmConfig()) -> Any:
    """
    Network regression target (u - c_skip * u_noisy) / c_out.

    Args:
        u: Clean state
        u_noisy: u + eta
        sigma: Noise level
        cfg: EDM configuration

    Returns:
        Target array shaped like u
    """
    if tuple(u.shape) != tuple(u_noisy.shape):
        raise ShapeError(f"Clean and noisy shapes differ: {tuple(u.shape)} vs {tuple(u_noisy.shape)}")
    c = precond_coeffs(sigma, cfg)
    return (u - c.c_skip * u_noisy) / c.c_out


def score_from_denoiser(d_out: Any, u_noisy: Any, sigma: float) -> Any:
    """Tweedie score estimate (D - x) / sigma^2."""
    sigma = _check_sigma(sigma)
    if tuple(d_out.shape) != tuple(u_noisy.shape):
        raise ArgumentError(f"Grid mismatch: {tuple(d_out.shape)} vs {tuple(u_noisy.shape)}")
    return (d_out - u_noisy) / (sigma * sigma)


def denoising_loss(raw_net: RawNet, cond: Any, u: Any, sigma: float, eta: Any,
                   cfg: EdmConfig = EdmConfig()) -> Any:
    """
    Single-instance weighted loss w(sigma) * mean((F - F_target)^2).

    The mean runs over grid points and channels.

    Args:
        raw_net: Raw network callable
        cond: Conditioning (already smoothed), channels-last
        u: Clean target state
        sigma: Noise level
        eta: Noise realization with std sigma, shaped like u
        cfg: EDM configuration

    Returns:
        Scalar loss of the array type produced by raw_net
    """
    _check_same_grid(u, cond)
    u_noisy = u + eta
    c = precond_coeffs(sigma, cfg)
    target = f_target(u, u_noisy, sigma, cfg)
    output = raw_net(c.c_in * u_noisy, cond, c.c_noise)
    return loss_weight(sigma, cfg) * ((output - target) ** 2).mean()
