"""Fourier-domain smoothing of conditioning fields for DeskDownscale.

Implements the 2D DFT pair and the randomized isotropic Gaussian low-pass
augmentation applied to the conditioning channels during training.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError
from .grid import Field
from .utils import get_logger

logger = get_logger(__name__)

ALPHA_MIN = 0.0
ALPHA_MAX = 0.8


@dataclass(frozen=True)
class Spectrum:
    """
    Unnormalized 2D DFT coefficients in zero-centered frequency order.

    ``coeffs[r, c]`` belongs to integer frequencies ``(ky[r], kx[c])`` with
    ``k in [-floor(n/2), ceil(n/2) - 1]``.
    """

    coeffs: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.coeffs.shape

    @property
    def ky(self) -> np.ndarray:
        return centered_frequencies(self.coeffs.shape[0])

    @property
    def kx(self) -> np.ndarray:
        return centered_frequencies(self.coeffs.shape[1])

    def power(self) -> np.ndarray:
        """|X(k)|^2 in centered order."""
        return np.abs(self.coeffs) ** 2

    def energy_above(self, radius: float) -> float:
        """
        Spectral energy at frequencies with |k| > radius.

        Args:
            radius: Integer-frequency radius

        Returns:
            Sum of |X(k)|^2 over the selected frequencies
        """
        ky, kx = np.meshgrid(self.ky, self.kx, indexing="ij")
        mask = np.hypot(ky, kx) > radius
        return float(self.power()[mask].sum())


def centered_frequencies(n: int) -> np.ndarray:
    """Integer frequencies -floor(n/2) .. ceil(n/2)-1 in ascending order."""
    return np.fft.fftshift(np.fft.fftfreq(n, d=1.0 / n)).round().astype(np.int64)


def dft2(values: np.ndarray) -> Spectrum:
    """
    Forward 2D DFT of one channel (unnormalized).

    Args:
        values: H x W real array

    Returns:
        Spectrum in zero-centered order
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or min(values.shape) < 1:
        raise ArgumentError(f"dft2 expects a non-empty 2D array, got shape {values.shape}")
    return Spectrum(np.fft.fftshift(np.fft.fft2(values)))


def idft2(spectrum: Spectrum) -> np.ndarray:
    """
    Inverse 2D DFT, returning the real part.

    Args:
        spectrum: Zero-centered spectrum

    Returns:
        H x W real array
    """
    return np.fft.ifft2(np.fft.ifftshift(spectrum.coeffs)).real


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not ALPHA_MIN <= alpha <= ALPHA_MAX:
        raise ArgumentError(f"Smoothing strength must lie in [{ALPHA_MIN}, {ALPHA_MAX}], got {alpha}")
    return alpha


def filter_bandwidth(H: int, W: int, alpha: float) -> float:
    """
    Gaussian bandwidth sigma_alpha = 0.5 * max(1, min(H, W)/2 * (1 - alpha)).

    Args:
        H: Rows
        W: Columns
        alpha: Smoothing strength in [0, 0.8]

    Returns:
        Bandwidth in integer-frequency units
    """
    alpha = _check_alpha(alpha)
    return 0.5 * max(1.0, min(H, W) / 2.0 * (1.0 - alpha))


def gaussian_lowpass(H: int, W: int, alpha: float) -> np.ndarray:
    """
    Isotropic Gaussian low-pass filter on zero-centered integer frequencies.

    Args:
        H: Rows
        W: Columns
        alpha: Smoothing strength in [0, 0.8]

    Returns:
        H x W filter, 1 at the zero frequency
    """
    bandwidth = filter_bandwidth(H, W, alpha)
    ky, kx = np.meshgrid(centered_frequencies(H), centered_frequencies(W), indexing="ij")
    return np.exp(-(kx.astype(np.float64) ** 2 + ky.astype(np.float64) ** 2) / (2.0 * bandwidth ** 2))


def smooth(field: Field, alpha: float) -> Field:
    """
    Low-pass every channel of a field in Fourier space.

    alpha = 0 returns the input unchanged.

    Args:
        field: Field to smooth
        alpha: Smoothing strength in [0, 0.8]

    Returns:
        Smoothed field on the same grid
    """
    alpha = _check_alpha(alpha)
    if alpha == 0.0:
        return field

    H, W = field.grid.shape
    kernel = np.fft.ifftshift(gaussian_lowpass(H, W, alpha))
    spectra = np.fft.fft2(field.data, axes=(0, 1))
    smoothed = np.fft.ifft2(spectra * kernel[:, :, None], axes=(0, 1)).real
    return field.with_data(smoothed)


def sample_alpha(rng: np.random.Generator) -> float:
    """Smoothing strength drawn uniformly from [0, 0.8]."""
    return float(rng.uniform(ALPHA_MIN, ALPHA_MAX))
