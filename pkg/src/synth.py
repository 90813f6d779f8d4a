"""Synthetic paired coarse/fine datasets for DeskDownscale.

Two tasks are available:

* ``gaussian``: smooth random coarse states u_bar and fine states
  u = gain * up(u_bar) + offset + noise, so p(u | u_bar) is known exactly.
* ``terrain``: procedural elevation and land-sea mask, fine truth built from a
  large-scale flow, elevation-dependent detail and small-scale roughness, and
  a coarse input equal to the block-mean of the truth plus a smooth bias that
  grows with lead time.

Generated values are rounded to f32 in memory, so a dataset read back from
disk is bit-identical to the one that was written.
"""

import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from .errors import ArgumentError, ConfigError, FormatError
from .grid import Channel, Field, Grid, StandardizationStats, compute_stats, sample_points, upsample_bilinear
from .sampler import GaussianTaskSpec
from .storage import read_field, to_storage_precision, write_field
from .utils import STATE_CHANNELS, STATIC_CHANNELS, get_logger, hash_file, hash_json, write_json
from .verify import VARIABLES, Observation, read_observations, wind_speed, write_observations

logger = get_logger(__name__)

MANIFEST_FILE = "manifest.json"
STATICS_FILE = "statics.edf"
STATIONS_FILE = "stations.csv"
SPLITS = ("train", "test")

# Mean and amplitude of the smooth large-scale state, in channel units
CLIMATOLOGY = {
    "t2m": (285.0, 4.0),
    "u10": (0.0, 3.0),
    "v10": (0.0, 3.0),
    "msl": (1013.0, 8.0),
}

# Amplitude of the terrain task's upstream bias per unit of ``bias``
BIAS_SCALE = {"t2m": 1.0, "u10": 0.5, "v10": 0.5, "msl": 1.0}
BIAS_GROWTH_H = 48.0

# Small-scale roughness amplitude per unit of ``roughness``
ROUGHNESS_SCALE = {"t2m": 0.5, "u10": 1.0, "v10": 1.0, "msl": 0.2}

# Raw elevation (unit std) below which a point is sea
SEA_LEVEL = -0.4
COAST_WIDTH = 0.1
WIND_DRAG = 0.3


def state_channels() -> tuple[Channel, ...]:
    return tuple(Channel(*c) for c in STATE_CHANNELS)


def static_channels() -> tuple[Channel, ...]:
    return tuple(Channel(*c) for c in STATIC_CHANNELS)


@dataclass(frozen=True)
class TerrainTaskSpec:
    """Parameters of the procedural terrain task."""

    fine_grid: Grid
    factor: int
    roughness: float = 0.5
    bias: float = 1.0
    spectral_slope: float = 3.0
    relief_km: float = 2.0
    lapse_rate: float = 6.5

    def __post_init__(self) -> None:
        if self.roughness < 0 or self.bias < 0:
            raise ConfigError("Terrain roughness and bias must be >= 0")
        if not self.spectral_slope > 0 or not self.relief_km > 0:
            raise ConfigError("Terrain spectral_slope and relief_km must be > 0")
        if self.factor < 1:
            raise ConfigError(f"factor must be >= 1, got {self.factor}")

    @property
    def coarse_grid(self) -> Grid:
        return self.fine_grid.coarsened(self.factor)

    def to_dict(self) -> dict[str, Any]:
        return {
            "roughness": self.roughness,
            "bias": self.bias,
            "spectral_slope": self.spectral_slope,
            "relief_km": self.relief_km,
            "lapse_rate": self.lapse_rate,
        }


@dataclass(frozen=True)
class TimeAxis:
    """Initialization times and lead times assigned to generated samples."""

    start_time: str = "2024-01-01T00:00:00"
    lead_times_h: tuple[int, ...] = (6, 12, 24, 48)

    def __post_init__(self) -> None:
        object.__setattr__(self, "lead_times_h", tuple(int(h) for h in self.lead_times_h))
        if not self.lead_times_h or min(self.lead_times_h) < 0:
            raise ConfigError(f"lead_times_h must be non-empty and >= 0, got {self.lead_times_h}")
        try:
            datetime.fromisoformat(self.start_time)
        except ValueError:
            raise ConfigError(f"start_time is not ISO-8601: '{self.start_time}'") from None

    def at(self, index: int) -> tuple[str, int]:
        """
        Valid time and lead time of sample ``index``.

        Initializations are spaced by whole days longer than the longest
        lead, so valid times never repeat.
        """
        lead = self.lead_times_h[index % len(self.lead_times_h)]
        spacing_days = math.ceil((max(self.lead_times_h) + 1) / 24)
        init = datetime.fromisoformat(self.start_time) + timedelta(days=index * spacing_days)
        return (init + timedelta(hours=lead)).isoformat(), lead


@dataclass(frozen=True)
class Sample:
    """One (coarse, fine) pair with its time metadata."""

    sample_id: str
    split: str
    valid_time: str
    lead_time_h: int
    coarse: Field
    fine: Field

    def meta(self) -> dict[str, Any]:
        return {
            "sample_id": self.sample_id,
            "split": self.split,
            "valid_time": self.valid_time,
            "lead_time_h": self.lead_time_h,
        }


@dataclass(frozen=True)
class DatasetManifest:
    """Dataset description stored as manifest.json."""

    task: str
    fine_grid: Grid
    coarse_grid: Grid
    factor: int
    count: int
    seed: int
    stats: StandardizationStats
    params: dict[str, Any]
    splits: dict[str, list[str]]

    def to_dict(self) -> dict[str, Any]:
        return {
            "task": self.task,
            "grids": {
                "fine": self.fine_grid.to_dict(),
                "coarse": self.coarse_grid.to_dict(),
                "factor": self.factor,
            },
            "count": self.count,
            "seed": self.seed,
            "stats": self.stats.to_dict(),
            "params": self.params,
            "splits": self.splits,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "DatasetManifest":
        try:
            return cls(
                task=data["task"],
                fine_grid=Grid.from_dict(data["grids"]["fine"]),
                coarse_grid=Grid.from_dict(data["grids"]["coarse"]),
                factor=int(data["grids"]["factor"]),
                count=int(data["count"]),
                seed=int(data["seed"]),
                stats=StandardizationStats.from_dict(data["stats"]),
                params=data["params"],
                splits={k: list(v) for k, v in data["splits"].items()},
            )
        except (KeyError, TypeError) as e:
            raise FormatError(f"Incomplete dataset manifest: {e}") from None


@dataclass
class Dataset:
    """A generated or loaded dataset."""

    manifest: DatasetManifest
    statics: Field
    samples: list[Sample] = field(default_factory=list)
    observations: list[Observation] = field(default_factory=list)

    def split(self, name: str) -> list[Sample]:
        if name not in SPLITS:
            raise ArgumentError(f"Unknown split '{name}'")
        return [s for s in self.samples if s.split == name]

    @property
    def gaussian_spec(self) -> GaussianTaskSpec:
        """Task parameters of a gaussian dataset."""
        if self.manifest.task != "gaussian":
            raise ArgumentError(f"Dataset task is '{self.manifest.task}', not gaussian")
        p = self.manifest.params
        return GaussianTaskSpec(self.manifest.fine_grid, self.manifest.factor,
                                p["gain"], p["offset"], p["noise_std"])


def smooth_random_field(rng: np.random.Generator, H: int, W: int, n_modes: int = 3) -> np.ndarray:
    """
    Zero-mean, unit-std random field made of low-order Fourier modes.

    Mode (ky, kx) has amplitude N(0, 1) / (1 + ky^2 + kx^2) and a uniform phase.

    Args:
        rng: Random stream
        H: Rows
        W: Columns
        n_modes: Highest wavenumber per axis

    Returns:
        H x W array
    """
    rows = np.arange(H, dtype=np.float64)[:, None] / H
    cols = np.arange(W, dtype=np.float64)[None, :] / W
    k = np.arange(n_modes + 1)
    ky, kx = np.meshgrid(k, k, indexing="ij")
    amps = rng.standard_normal(ky.shape) / (1.0 + ky ** 2 + kx ** 2)
    phases = rng.uniform(0.0, 2.0 * np.pi, ky.shape)
    amps[0, 0] = 0.0

    values = np.zeros((H, W))
    for a, p, y, x in zip(amps.ravel(), phases.ravel(), ky.ravel(), kx.ravel()):
        values += a * np.cos(2.0 * np.pi * (y * rows + x * cols) + p)
    values -= values.mean()
    std = values.std()
    return values / std if std > 0 else values


def power_law_field(rng: np.random.Generator, H: int, W: int, slope: float) -> np.ndarray:
    """Zero-mean, unit-std random field with power spectrum ~ |k|^-slope."""
    ky = np.fft.fftfreq(H) * H
    kx = np.fft.fftfreq(W) * W
    k = np.hypot(ky[:, None], kx[None, :])
    k[0, 0] = 1.0
    amplitude = k ** (-slope / 2.0)
    amplitude[0, 0] = 0.0
    values = np.fft.ifft2(np.fft.fft2(rng.standard_normal((H, W))) * amplitude).real
    values -= values.mean()
    return values / values.std()


def coarsen(fine: Field, factor: int) -> Field:
    """
    Block mean over factor x factor cells.

    Args:
        fine: Field to coarsen
        factor: Integer factor dividing H and W

    Returns:
        Field on the grid of block centers
    """
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ArgumentError(f"Coarsening factor must be a positive integer, got {factor}")
    if factor == 1:
        return fine
    coarse_grid = fine.grid.coarsened(factor)
    H, W, C = fine.data.shape
    blocks = fine.data.reshape(H // factor, factor, W // factor, factor, C)
    return Field(coarse_grid, fine.channels, blocks.mean(axis=(1, 3)))


def flat_statics(grid: Grid) -> Field:
    """Sea-level, all-land statics (z = 0, lsm = 1)."""
    data = np.zeros((grid.H, grid.W, 2))
    data[:, :, 1] = 1.0
    return Field(grid, static_channels(), data)


def terrain_statics(rng: np.random.Generator, spec: TerrainTaskSpec) -> Field:
    """
    Procedural elevation (km) and land-sea mask on the fine grid.

    Args:
        rng: Random stream
        spec: Terrain task

    Returns:
        Field with channels z, lsm
    """
    grid = spec.fine_grid
    raw = power_law_field(rng, grid.H, grid.W, spec.spectral_slope)
    above = np.maximum(raw - SEA_LEVEL, 0.0)
    peak = above.max()
    z = spec.relief_km * above / peak if peak > 0 else above
    lsm = 1.0 / (1.0 + np.exp(-(raw - SEA_LEVEL) / COAST_WIDTH))
    return to_storage_precision(Field(grid, static_channels(), np.stack([z, lsm], axis=-1)))


def _large_scale_state(rng: np.random.Generator, H: int, W: int, n_modes: int) -> np.ndarray:
    layers = []
    for name, _ in STATE_CHANNELS:
        mean, amplitude = CLIMATOLOGY[name]
        layers.append(mean + amplitude * smooth_random_field(rng, H, W, n_modes))
    return np.stack(layers, axis=-1)


def _assign_splits(count: int, test_count: int) -> list[str]:
    if count < 1 or test_count < 0:
        raise ArgumentError(f"Need count >= 1 and test_count >= 0, got {count}, {test_count}")
    return ["train"] * count + ["test"] * test_count


def _build_dataset(task: str, fine_grid: Grid, factor: int, seed: int, params: dict[str, Any],
                   statics: Field, samples: list[Sample]) -> Dataset:
    train_fine = [s.fine for s in samples if s.split == "train"]
    manifest = DatasetManifest(
        task=task,
        fine_grid=fine_grid,
        coarse_grid=fine_grid.coarsened(factor),
        factor=factor,
        count=len(samples),
        seed=seed,
        stats=compute_stats(train_fine),
        params=params,
        splits={name: [s.sample_id for s in samples if s.split == name] for name in SPLITS},
    )
    return Dataset(manifest=manifest, statics=statics, samples=samples)


def gen_gaussian_task(spec: GaussianTaskSpec, count: int, seed: int, test_count: int = 0,
                      times: TimeAxis = TimeAxis(), n_modes: int = 3) -> Dataset:
    """
    Generate the conditional-Gaussian task.

    Args:
        spec: Task parameters and grids
        count: Number of training pairs
        seed: Dataset seed
        test_count: Number of held-out pairs
        times: Time metadata
        n_modes: Highest wavenumber of the coarse states

    Returns:
        Dataset with flat statics
    """
    rng = np.random.default_rng(seed)
    coarse_grid = spec.coarse_grid
    fine_grid = spec.fine_grid
    channels = state_channels()

    samples = []
    for i, split in enumerate(_assign_splits(count, test_count)):
        coarse = to_storage_precision(
            Field(coarse_grid, channels, _large_scale_state(rng, coarse_grid.H, coarse_grid.W, n_modes))
        )
        up = upsample_bilinear(coarse, fine_grid)
        noise = rng.standard_normal(up.data.shape) * spec.noise_stds
        fine = to_storage_precision(up.with_data(spec.mean(up.data) + noise))
        valid_time, lead = times.at(i)
        samples.append(Sample(f"{i:04d}", split, valid_time, lead, coarse, fine))

    logger.info(f"Generated gaussian task: {len(samples)} pairs on {fine_grid.H}x{fine_grid.W}")
    return _build_dataset("gaussian", fine_grid, spec.factor, seed, spec.to_dict(),
                          flat_statics(fine_grid), samples)


def gen_terrain_task(spec: TerrainTaskSpec, count: int, seed: int, test_count: int = 0,
                     times: TimeAxis = TimeAxis()) -> Dataset:
    """
    Generate the procedural-terrain task.

    Args:
        spec: Terrain parameters and grids
        count: Number of training pairs
        seed: Dataset seed
        test_count: Number of held-out pairs
        times: Time metadata

    Returns:
        Dataset with generated statics
    """
    rng = np.random.default_rng(seed)
    fine_grid = spec.fine_grid
    coarse_grid = spec.coarse_grid
    channels = state_channels()

    statics = terrain_statics(rng, spec)
    z = statics.channel("z")
    drag = 1.0 - WIND_DRAG * z / spec.relief_km

    samples = []
    for i, split in enumerate(_assign_splits(count, test_count)):
        valid_time, lead = times.at(i)
        flow = _large_scale_state(rng, fine_grid.H, fine_grid.W, n_modes=2)
        rough = rng.standard_normal(flow.shape)

        truth = flow.copy()
        truth[:, :, 0] -= spec.lapse_rate * z
        truth[:, :, 1] *= drag
        truth[:, :, 2] *= drag
        for c, (name, _) in enumerate(STATE_CHANNELS):
            truth[:, :, c] += spec.roughness * ROUGHNESS_SCALE[name] * rough[:, :, c]
        fine = to_storage_precision(Field(fine_grid, channels, truth))

        bias_amp = spec.bias * (1.0 + lead / BIAS_GROWTH_H)
        bias = np.stack(
            [bias_amp * BIAS_SCALE[name] * smooth_random_field(rng, coarse_grid.H, coarse_grid.W, 2)
             for name, _ in STATE_CHANNELS],
            axis=-1,
        )
        block_mean = coarsen(fine, spec.factor)
        coarse = to_storage_precision(block_mean.with_data(block_mean.data + bias))
        samples.append(Sample(f"{i:04d}", split, valid_time, lead, coarse, fine))

    logger.info(f"Generated terrain task: {len(samples)} pairs on {fine_grid.H}x{fine_grid.W}")
    return _build_dataset("terrain", fine_grid, spec.factor, seed, spec.to_dict(), statics, samples)


def station_locations(rng: np.random.Generator, grid: Grid, n_stations: int) -> list[tuple[float, float]]:
    """Uniform random locations inside the hull of the grid's nodes."""
    lats, lons = grid.lats, grid.lons
    lat = rng.uniform(min(lats[0], lats[-1]), max(lats[0], lats[-1]), n_stations)
    lon = rng.uniform(min(lons[0], lons[-1]), max(lons[0], lons[-1]), n_stations)
    return list(zip(lat.tolist(), lon.tolist()))


def gen_stations(truths: Sequence[tuple[str, Field]], n_stations: int, obs_noise_std: float, seed: int,
                 locations: Optional[Sequence[tuple[float, float]]] = None) -> list[Observation]:
    """
    Synthetic station observations of truth fields.

    Station locations are drawn once and reused for every valid time. Wind
    speed is derived from the interpolated u10/v10 before noise is added.

    Args:
        truths: (valid_time, truth field) pairs
        n_stations: Number of stations (ignored when locations are given)
        obs_noise_std: Observation error std, same for every variable
        seed: Station seed
        locations: Optional fixed (lat, lon) list

    Returns:
        Observations ordered by time, station, variable
    """
    if not truths:
        raise ArgumentError("No truth fields to observe")
    if obs_noise_std < 0:
        raise ArgumentError(f"obs_noise_std must be >= 0, got {obs_noise_std}")
    rng = np.random.default_rng(seed)
    if locations is None:
        if n_stations < 1:
            raise ArgumentError(f"n_stations must be >= 1, got {n_stations}")
        locations = station_locations(rng, truths[0][1].grid, n_stations)

    observations = []
    for valid_time, truth in truths:
        for s, (lat, lon) in enumerate(locations):
            values = sample_points(truth, lat, lon)
            exact = {name: float(values[truth.index(name)]) for name in truth.names}
            exact["wind_speed"] = wind_speed(exact["u10"], exact["v10"])
            for variable in VARIABLES:
                observations.append(Observation(
                    station_id=f"ST{s + 1:04d}",
                    lat=float(lat),
                    lon=float(lon),
                    valid_time=valid_time,
                    variable=variable,
                    value=exact[variable] + float(rng.normal(0.0, obs_noise_std)),
                ))
    return observations


def write_dataset(root: Path, dataset: Dataset) -> Path:
    """
    Write a dataset: manifest.json, statics.edf, per-split pair files and,
    when present, stations.csv.

    The manifest records a SHA-256 per file and a content hash over the
    manifest body and the file hashes.

    Args:
        root: Dataset directory
        dataset: Dataset to write

    Returns:
        Path of the manifest
    """
    root.mkdir(parents=True, exist_ok=True)
    written = [STATICS_FILE]
    write_field(root / STATICS_FILE, dataset.statics)

    for s in dataset.samples:
        for kind, f in (("coarse", s.coarse), ("fine", s.fine)):
            rel = f"{s.split}/{s.sample_id}_{kind}.edf"
            write_field(root / rel, f)
            written.append(rel)

    if dataset.observations:
        write_observations(root / STATIONS_FILE, dataset.observations)
        written.append(STATIONS_FILE)

    body = dataset.manifest.to_dict()
    body["samples"] = [s.meta() for s in dataset.samples]
    body["files"] = {rel: hash_file(root / rel) for rel in written}
    body["content_hash"] = hash_json({k: v for k, v in body.items() if k != "content_hash"})

    path = root / MANIFEST_FILE
    write_json(path, body)
    logger.info(f"Dataset written to {root} ({len(dataset.samples)} pairs)")
    return path


def read_dataset(root: Path) -> Dataset:
    """
    Read and verify a dataset written by write_dataset.

    Args:
        root: Dataset directory

    Returns:
        Dataset

    Raises:
        FileNotFoundError: If the manifest is missing
        FormatError: On hash mismatches or malformed files
    """
    path = root / MANIFEST_FILE
    if not path.exists():
        raise FileNotFoundError(f"No dataset manifest at {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            body = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON: {e}") from None

    files = body.get("files", {})
    expected = hash_json({k: v for k, v in body.items() if k != "content_hash"})
    if body.get("content_hash") != expected:
        raise FormatError(f"{path}: content hash mismatch")
    for rel, digest in files.items():
        if not (root / rel).exists():
            raise FormatError(f"{root / rel}: listed in manifest but missing")
        if hash_file(root / rel) != digest:
            raise FormatError(f"{root / rel}: SHA-256 mismatch")

    manifest = DatasetManifest.from_dict(body)
    samples = []
    for meta in body.get("samples", []):
        try:
            sid, split = meta["sample_id"], meta["split"]
            valid_time, lead = meta["valid_time"], int(meta["lead_time_h"])
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{path}: invalid sample entry {meta!r} ({e})") from None
        samples.append(Sample(
            sample_id=sid,
            split=split,
            valid_time=valid_time,
            lead_time_h=lead,
            coarse=read_field(root / f"{split}/{sid}_coarse.edf"),
            fine=read_field(root / f"{split}/{sid}_fine.edf"),
        ))

    observations = read_observations(root / STATIONS_FILE) if STATIONS_FILE in files else []
    return Dataset(manifest=manifest, statics=read_field(root / STATICS_FILE),
                   samples=samples, observations=observations)
