"""Noise schedule, PF-ODE and SDE samplers, ensembles and the Gaussian oracle.

All sampler state is channels-last numpy in standardized units. A denoiser is
any callable ``denoiser(x, cond, sigma) -> D(x)`` on arrays of shape
``(..., H, W, C)``; a leading batch axis is passed straight through, which is
how the oracle checks draw thousands of samples at once.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Optional, Sequence, Union

import numpy as np

from .edm import EdmConfig, RawNet, denoise
from .errors import ArgumentError, ConfigError, SamplingAborted, ShapeError
from .grid import Channel, Field, Grid
from .utils import STATE_CHANNELS, get_logger

logger = get_logger(__name__)

Denoiser = Callable[[np.ndarray, np.ndarray, float], np.ndarray]

SAMPLER_KINDS = ("ode", "sde")

# Recorded in every ensemble sidecar
CHILD_SEED_ALGORITHM = "numpy.SeedSequence(entropy=base_seed, spawn_key=(k,)).generate_state(1, uint32)[0]"


@dataclass(frozen=True)
class SigmaSchedule:
    """Strictly decreasing noise levels sigma_1 = sigma_max ... sigma_N = sigma_min."""

    steps: int
    sigma_min: float
    sigma_max: float
    rho: float
    levels: tuple[float, ...]

    def to_dict(self) -> dict[str, Any]:
        return {"steps": self.steps, "sigma_min": self.sigma_min, "sigma_max": self.sigma_max, "rho": self.rho}


def edm_schedule(steps: int = 128, sigma_min: float = 0.002, sigma_max: float = 80.0,
                 rho: float = 7.0) -> SigmaSchedule:
    """
    Power-law EDM noise schedule.

    sigma_i = (sigma_max^(1/rho) + (i-1)/(N-1) * (sigma_min^(1/rho) - sigma_max^(1/rho)))^rho,
    evaluated in float64. The endpoints are pinned to sigma_max and sigma_min.

    Args:
        steps: Number of levels N >= 2
        sigma_min: Final noise level
        sigma_max: Initial noise level
        rho: Power exponent

    Returns:
        SigmaSchedule
    """
    if steps < 2:
        raise ArgumentError(f"Schedule needs at least 2 levels, got {steps}")
    if not 0 < sigma_min < sigma_max:
        raise ArgumentError(f"Need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}")
    if not rho > 0:
        raise ArgumentError(f"rho must be > 0, got {rho}")

    t = np.arange(steps, dtype=np.float64) / (steps - 1)
    hi = sigma_max ** (1.0 / rho)
    lo = sigma_min ** (1.0 / rho)
    levels = (hi + t * (lo - hi)) ** rho
    levels[0] = sigma_max
    levels[-1] = sigma_min

    if not np.all(np.diff(levels) < 0):
        raise ArgumentError("Schedule is not strictly decreasing; increase spacing or reduce steps")
    return SigmaSchedule(steps, float(sigma_min), float(sigma_max), float(rho), tuple(float(s) for s in levels))


def _check_finite(x: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(x)):
        raise SamplingAborted("Non-finite sampler state", step)


def pf_ode_step(x: np.ndarray, sigma_cur: float, sigma_next: float, denoiser: Denoiser,
                cond: np.ndarray, step: int = 0) -> np.ndarray:
    """
    One explicit Euler step of dx/dsigma = (x - D(x, cond, sigma)) / sigma.

    Args:
        x: Current state
        sigma_cur: Current noise level
        sigma_next: Next (smaller) noise level
        denoiser: Denoiser callable
        cond: Conditioning input
        step: Step index reported if the state is non-finite

    Returns:
        State at sigma_next
    """
    if not sigma_cur > sigma_next > 0:
        raise ArgumentError(f"Need sigma_cur > sigma_next > 0, got {sigma_cur}, {sigma_next}")
    _check_finite(x, step)
    d = denoiser(x, cond, sigma_cur)
    return x + (sigma_next - sigma_cur) * (x - d) / sigma_cur


def integrate_pf_ode(denoiser: Denoiser, cond: np.ndarray, schedule: SigmaSchedule,
                     x0: np.ndarray) -> np.ndarray:
    """
    Integrate the probability-flow ODE over the whole schedule from x0.

    The state at sigma_min is returned as is, without a final denoising step.

    Args:
        denoiser: Denoiser callable
        cond: Conditioning input
        schedule: Noise levels
        x0: Initial state at sigma_max

    Returns:
        Final state
    """
    x = np.asarray(x0, dtype=np.float64)
    levels = schedule.levels
    for i in range(len(levels) - 1):
        x = pf_ode_step(x, levels[i], levels[i + 1], denoiser, cond, step=i)
        _check_finite(x, i)
    return x


def sde_step(x: np.ndarray, sigma_cur: float, sigma_next: float, denoiser: Denoiser,
             cond: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """
    One Euler-Maruyama step of the reverse SDE with sigma(t) = t.

    x' = x + 2*dt/sigma * (D - x) + sqrt(2*sigma*dt) * z, dt = sigma_cur - sigma_next.

    Args:
        x: Current state
        sigma_cur: Current noise level
        sigma_next: Next (smaller) noise level
        denoiser: Denoiser callable
        cond: Conditioning input
        rng: Noise stream

    Returns:
        State at sigma_next
    """
    if not sigma_cur > sigma_next > 0:
        raise ArgumentError(f"Need sigma_cur > sigma_next > 0, got {sigma_cur}, {sigma_next}")
    dt = sigma_cur - sigma_next
    d = denoiser(x, cond, sigma_cur)
    z = rng.standard_normal(x.shape)
    return x + (2.0 * dt / sigma_cur) * (d - x) + math.sqrt(2.0 * sigma_cur * dt) * z


def integrate_sde(denoiser: Denoiser, cond: np.ndarray, schedule: SigmaSchedule,
                  x0: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Euler-Maruyama over the whole schedule from x0."""
    x = np.asarray(x0, dtype=np.float64)
    levels = schedule.levels
    for i in range(len(levels) - 1):
        x = sde_step(x, levels[i], levels[i + 1], denoiser, cond, rng)
        _check_finite(x, i)
    return x


def child_seed(base_seed: int, k: int) -> int:
    """
    Seed of ensemble member k.

    Derived with numpy's SeedSequence using the member index as spawn key,
    so member streams are independent and do not depend on n.
    """
    if k < 0:
        raise ArgumentError(f"Member index must be >= 0, got {k}")
    seq = np.random.SeedSequence(entropy=int(base_seed), spawn_key=(int(k),))
    return int(seq.generate_state(1, np.uint32)[0])


def _cond_array(cond: Union[Field, np.ndarray]) -> tuple[np.ndarray, Optional[Grid]]:
    if isinstance(cond, Field):
        return cond.data, cond.grid
    return np.asarray(cond, dtype=np.float64), None


def _as_field(x: np.ndarray, grid: Optional[Grid], channels: Sequence[Channel]) -> Union[Field, np.ndarray]:
    if grid is None:
        return x
    if x.shape[-1] != len(channels):
        raise ShapeError(f"Sampler produced {x.shape[-1]} channels, expected {len(channels)}")
    return Field(grid, tuple(channels), x)


def initial_state(rng: np.random.Generator, shape: tuple[int, ...], sigma_max: float) -> np.ndarray:
    """Initial noise x ~ N(0, sigma_max^2 I)."""
    return rng.standard_normal(shape) * sigma_max


def sample(denoiser: Denoiser, cond: Union[Field, np.ndarray], schedule: SigmaSchedule, seed: int,
           channels: Sequence[Channel] = STATE_CHANNELS) -> Union[Field, np.ndarray]:
    """
    Draw one sample by integrating the PF-ODE from N(0, sigma_max^2).

    Args:
        denoiser: Denoiser callable
        cond: Prepared conditioning (Field or channels-last array)
        schedule: Noise levels
        seed: Seed of the initial noise
        channels: Output channel layout

    Returns:
        Standardized sample on the conditioning grid (Field if cond is a Field)
    """
    cond_data, grid = _cond_array(cond)
    shape = cond_data.shape[:-1] + (len(channels),)
    rng = np.random.default_rng(seed)
    x = integrate_pf_ode(denoiser, cond_data, schedule, initial_state(rng, shape, schedule.sigma_max))
    return _as_field(x, grid, [c if isinstance(c, Channel) else Channel(*c) for c in channels])


def sde_sample(denoiser: Denoiser, cond: Union[Field, np.ndarray], schedule: SigmaSchedule, seed: int,
               channels: Sequence[Channel] = STATE_CHANNELS) -> Union[Field, np.ndarray]:
    """
    Draw one sample with the Euler-Maruyama reverse-SDE sampler.

    One generator seeded with ``seed`` provides the initial noise and every
    injection, in that order.
    """
    cond_data, grid = _cond_array(cond)
    shape = cond_data.shape[:-1] + (len(channels),)
    rng = np.random.default_rng(seed)
    x0 = initial_state(rng, shape, schedule.sigma_max)
    x = integrate_sde(denoiser, cond_data, schedule, x0, rng)
    return _as_field(x, grid, [c if isinstance(c, Channel) else Channel(*c) for c in channels])


@dataclass(frozen=True)
class Ensemble:
    """Exchangeable samples sharing one conditioning input."""

    members: tuple[Field, ...]
    seeds: tuple[int, ...]
    base_seed: int
    sampler: str
    cond: Optional[Field] = None

    def __post_init__(self) -> None:
        if not self.members:
            raise ArgumentError("An ensemble needs at least one member")
        first = self.members[0]
        for m in self.members[1:]:
            if not m.grid.matches(first.grid) or m.names != first.names:
                raise ShapeError("Ensemble members must share grid and channels")

    @property
    def n(self) -> int:
        return len(self.members)

    def stacked(self) -> np.ndarray:
        """Member data stacked to (n, H, W, C)."""
        return np.stack([m.data for m in self.members])


def sample_ensemble(denoiser: Denoiser, cond: Field, schedule: SigmaSchedule, n: int, base_seed: int,
                    sampler: str = "ode", workers: int = 1,
                    channels: Sequence[Channel] = STATE_CHANNELS) -> Ensemble:
    """
    Draw n members, member k seeded with child_seed(base_seed, k).

    With workers > 1 members run in a thread pool; each member owns its RNG,
    so the result is bit-identical to sequential generation.

    Args:
        denoiser: Denoiser callable, safe for concurrent calls
        cond: Prepared conditioning field
        schedule: Noise levels
        n: Ensemble size
        base_seed: Ensemble seed
        sampler: "ode" or "sde"
        workers: Thread count
        channels: Output channel layout

    Returns:
        Ensemble in member-index order
    """
    if n < 1:
        raise ArgumentError(f"Ensemble size must be >= 1, got {n}")
    if sampler not in SAMPLER_KINDS:
        raise ArgumentError(f"Unknown sampler '{sampler}'")
    draw = sample if sampler == "ode" else sde_sample
    seeds = tuple(child_seed(base_seed, k) for k in range(n))

    def run(k: int) -> Field:
        member = draw(denoiser, cond, schedule, seeds[k], channels)
        logger.info(f"Ensemble member {k + 1}/{n} done (seed {seeds[k]})")
        return member

    if workers > 1 and n > 1:
        with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="member") as pool:
            members = list(pool.map(run, range(n)))
    else:
        members = [run(k) for k in range(n)]

    return Ensemble(tuple(members), seeds, int(base_seed), sampler, cond)


class NetworkDenoiser:
    """EDM-preconditioned denoiser around a raw network."""

    def __init__(self, raw_net: RawNet, cfg: EdmConfig = EdmConfig()) -> None:
        self.raw_net = raw_net
        self.cfg = cfg

    def __call__(self, x: np.ndarray, cond: np.ndarray, sigma: float) -> np.ndarray:
        return denoise(self.raw_net, x, cond, sigma, self.cfg)


class RegressionPredictor:
    """Deterministic prediction from a regression-trained network, F(0, cond; 0)."""

    def __init__(self, raw_net: RawNet) -> None:
        self.raw_net = raw_net

    def predict(self, cond: Field, channels: Sequence[Channel] = STATE_CHANNELS) -> Field:
        channels = [c if isinstance(c, Channel) else Channel(*c) for c in channels]
        zeros = np.zeros(cond.data.shape[:-1] + (len(channels),))
        return Field(cond.grid, tuple(channels), self.raw_net(zeros, cond.data, 0.0))

    def ensemble(self, cond: Field, n: int, channels: Sequence[Channel] = STATE_CHANNELS) -> Ensemble:
        """The single prediction replicated n times."""
        if n < 1:
            raise ArgumentError(f"Ensemble size must be >= 1, got {n}")
        member = self.predict(cond, channels)
        return Ensemble(tuple([member] * n), tuple([0] * n), 0, "regression", cond)


def _per_channel(value: Union[float, Sequence[float]], name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(value, dtype=np.float64))
    if arr.ndim != 1 or not np.all(np.isfinite(arr)):
        raise ConfigError(f"{name} must be a finite scalar or per-channel list")
    return arr


@dataclass(frozen=True)
class GaussianTaskSpec:
    """
    Conditional Gaussian task p(u | u_bar) = N(gain * up(u_bar) + offset, noise_std^2 I).

    gain, offset and noise_std are scalars or one value per state channel.
    """

    fine_grid: Grid
    factor: int
    gain: Union[float, tuple[float, ...]] = 1.0
    offset: Union[float, tuple[float, ...]] = 0.5
    noise_std: Union[float, tuple[float, ...]] = 1.0

    def __post_init__(self) -> None:
        for name in ("gain", "offset", "noise_std"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)):
                object.__setattr__(self, name, tuple(float(v) for v in value))
        if np.any(_per_channel(self.noise_std, "noise_std") <= 0):
            raise ConfigError(f"noise_std must be > 0, got {self.noise_std}")
        if self.factor < 1:
            raise ConfigError(f"factor must be >= 1, got {self.factor}")

    @property
    def coarse_grid(self) -> Grid:
        return self.fine_grid.coarsened(self.factor)

    @property
    def gains(self) -> np.ndarray:
        return _per_channel(self.gain, "gain")

    @property
    def offsets(self) -> np.ndarray:
        return _per_channel(self.offset, "offset")

    @property
    def noise_stds(self) -> np.ndarray:
        return _per_channel(self.noise_std, "noise_std")

    def mean(self, cond_up: np.ndarray) -> np.ndarray:
        """Conditional mean gain * cond_up + offset, channels-last."""
        return self.gains * cond_up + self.offsets

    def standardized(self, mean: np.ndarray, std: np.ndarray) -> "GaussianTaskSpec":
        """
        The same task expressed in standardized units (x - mean) / std.

        Args:
            mean: Per-channel means
            std: Per-channel standard deviations

        Returns:
            GaussianTaskSpec with per-channel parameters
        """
        a = np.broadcast_to(self.gains, mean.shape)
        b = (a * mean + self.offsets - mean) / std
        s = np.broadcast_to(self.noise_stds, std.shape) / std
        return GaussianTaskSpec(self.fine_grid, self.factor, tuple(a), tuple(b), tuple(s))

    def to_dict(self) -> dict[str, Any]:
        def plain(v: Any) -> Any:
            return list(v) if isinstance(v, tuple) else v
        return {
            "gain": plain(self.gain),
            "offset": plain(self.offset),
            "noise_std": plain(self.noise_std),
        }


def oracle_denoiser(task: GaussianTaskSpec, u_noisy: np.ndarray, cond: np.ndarray, sigma: float) -> np.ndarray:
    """
    Exact posterior mean D* = m + s^2 / (s^2 + sigma^2) * (u_noisy - m), m = a * u_bar + b.

    Args:
        task: Gaussian task
        u_noisy: Noisy state
        cond: Conditioning; its first channels are the upsampled u_bar
        sigma: Noise level

    Returns:
        Denoised state shaped like u_noisy
    """
    if not sigma > 0:
        raise ArgumentError(f"Noise level must be > 0, got {sigma}")
    n_state = u_noisy.shape[-1]
    m = task.mean(np.asarray(cond)[..., :n_state])
    s2 = task.noise_stds ** 2
    return m + s2 / (s2 + sigma * sigma) * (u_noisy - m)


class OracleDenoiser:
    """Denoiser callable bound to a Gaussian task."""

    def __init__(self, task: GaussianTaskSpec) -> None:
        self.task = task

    def __call__(self, x: np.ndarray, cond: np.ndarray, sigma: float) -> np.ndarray:
        return oracle_denoiser(self.task, x, cond, sigma)
