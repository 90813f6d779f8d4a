"""Regular lat-lon grids and multi-channel fields for DeskDownscale.

Every other module works on the containers defined here: an immutable
``Grid`` description, a ``Field`` holding ``H x W x C`` values, bilinear
sampling/resampling and per-channel standardization.
"""

from dataclasses import dataclass
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import ArgumentError, ConfigError, DomainError, ShapeError
from .utils import get_logger

logger = get_logger(__name__)

# Slack for floating-point round-off at the footprint edge, in index units
_EDGE_TOLERANCE = 1e-9


@dataclass(frozen=True)
class Grid:
    """Regular lat-lon grid described by its first cell center and spacing."""

    lat0: float
    lon0: float
    dlat: float
    dlon: float
    H: int
    W: int

    def __post_init__(self) -> None:
        if self.H < 2 or self.W < 2:
            raise ArgumentError(f"Grid needs at least 2x2 nodes, got {self.H}x{self.W}")
        if self.dlat == 0 or self.dlon == 0:
            raise ArgumentError("Grid spacing must be non-zero")
        if not all(np.isfinite([self.lat0, self.lon0, self.dlat, self.dlon])):
            raise ArgumentError("Grid coordinates must be finite")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.H, self.W)

    @property
    def lats(self) -> np.ndarray:
        """Row-center latitudes."""
        return self.lat0 + self.dlat * np.arange(self.H, dtype=np.float64)

    @property
    def lons(self) -> np.ndarray:
        """Column-center longitudes."""
        return self.lon0 + self.dlon * np.arange(self.W, dtype=np.float64)

    def footprint(self) -> tuple[float, float, float, float]:
        """
        Bounding box covered by the grid cells (centers plus half a cell).

        Returns:
            Tuple of (lat_min, lat_max, lon_min, lon_max)
        """
        lat_edges = (self.lat0 - 0.5 * self.dlat, self.lat0 + (self.H - 0.5) * self.dlat)
        lon_edges = (self.lon0 - 0.5 * self.dlon, self.lon0 + (self.W - 0.5) * self.dlon)
        return (min(lat_edges), max(lat_edges), min(lon_edges), max(lon_edges))

    def fractional_index(self, lat: Any, lon: Any) -> tuple[np.ndarray, np.ndarray]:
        """
        Convert coordinates to fractional (row, column) indices.

        Args:
            lat: Latitude(s) in degrees
            lon: Longitude(s) in degrees

        Returns:
            Tuple of (row_index, column_index) arrays
        """
        rows = (np.asarray(lat, dtype=np.float64) - self.lat0) / self.dlat
        cols = (np.asarray(lon, dtype=np.float64) - self.lon0) / self.dlon
        return rows, cols

    def contains(self, lat: Any, lon: Any) -> np.ndarray:
        """Boolean mask of coordinates inside the grid footprint."""
        rows, cols = self.fractional_index(lat, lon)
        lo = -0.5 - _EDGE_TOLERANCE
        return (
            (rows >= lo) & (rows <= self.H - 0.5 + _EDGE_TOLERANCE)
            & (cols >= lo) & (cols <= self.W - 0.5 + _EDGE_TOLERANCE)
        )

    def coarsened(self, factor: int) -> "Grid":
        """
        Grid of factor x factor block centers covering the same footprint.

        Args:
            factor: Integer coarsening factor dividing H and W

        Returns:
            The coarse grid
        """
        if factor < 1 or self.H % factor or self.W % factor:
            raise ArgumentError(
                f"Coarsening factor {factor} does not divide grid {self.H}x{self.W}"
            )
        shift = 0.5 * (factor - 1)
        return Grid(
            lat0=self.lat0 + shift * self.dlat,
            lon0=self.lon0 + shift * self.dlon,
            dlat=self.dlat * factor,
            dlon=self.dlon * factor,
            H=self.H // factor,
            W=self.W // factor,
        )

    def matches(self, other: "Grid", rtol: float = 1e-12) -> bool:
        """True if both grids describe the same nodes up to round-off."""
        return (
            self.H == other.H and self.W == other.W
            and np.allclose(
                [self.lat0, self.lon0, self.dlat, self.dlon],
                [other.lat0, other.lon0, other.dlat, other.dlon],
                rtol=rtol, atol=1e-12,
            )
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "lat0": self.lat0, "lon0": self.lon0,
            "dlat": self.dlat, "dlon": self.dlon,
            "H": self.H, "W": self.W,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Grid":
        return cls(
            lat0=float(data["lat0"]), lon0=float(data["lon0"]),
            dlat=float(data["dlat"]), dlon=float(data["dlon"]),
            H=int(data["H"]), W=int(data["W"]),
        )


@dataclass(frozen=True)
class Channel:
    """A named field channel with its unit string."""

    name: str
    unit: str


@dataclass(frozen=True)
class Field:
    """
    A C-channel scalar field on a Grid.

    ``data`` is stored as a read-only float64 array of shape (H, W, C),
    channels innermost.
    """

    grid: Grid
    channels: tuple[Channel, ...]
    data: np.ndarray

    def __post_init__(self) -> None:
        channels = tuple(
            c if isinstance(c, Channel) else Channel(*c) for c in self.channels
        )
        data = np.array(self.data, dtype=np.float64, copy=True)

        if data.shape != (self.grid.H, self.grid.W, len(channels)):
            raise ShapeError(
                f"Field data shape {data.shape} does not match "
                f"grid {self.grid.H}x{self.grid.W} with {len(channels)} channels"
            )
        names = [c.name for c in channels]
        if len(set(names)) != len(names):
            raise ArgumentError(f"Duplicate channel names: {names}")
        if not np.all(np.isfinite(data)):
            raise ArgumentError("Field contains non-finite values")

        data.flags.writeable = False
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "data", data)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.channels)

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    def index(self, name: str) -> int:
        """
        Position of a channel by name.

        Args:
            name: Channel name

        Returns:
            Channel index
        """
        try:
            return self.names.index(name)
        except ValueError:
            raise ArgumentError(f"Field has no channel '{name}' (has {self.names})") from None

    def channel(self, name: str) -> np.ndarray:
        """Read-only (H, W) view of one channel."""
        return self.data[:, :, self.index(name)]

    def with_data(self, data: np.ndarray) -> "Field":
        """Same grid and channels, new values."""
        return Field(self.grid, self.channels, data)

    def select(self, names: Sequence[str]) -> "Field":
        """Subset of channels in the given order."""
        idx = [self.index(n) for n in names]
        return Field(self.grid, tuple(self.channels[i] for i in idx), self.data[:, :, idx])


def concat_fields(fields: Sequence[Field]) -> Field:
    """
    Concatenate fields channel-wise.

    Args:
        fields: Fields on the same grid

    Returns:
        Field with all channels in order
    """
    if not fields:
        raise ArgumentError("Nothing to concatenate")
    grid = fields[0].grid
    for f in fields[1:]:
        if not f.grid.matches(grid):
            raise ShapeError("Cannot concatenate fields on different grids")
    channels = tuple(c for f in fields for c in f.channels)
    return Field(grid, channels, np.concatenate([f.data for f in fields], axis=2))


def bilinear_weights(
    grid: Grid, lat: Any, lon: Any
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Lower-left node indices and fractional offsets for bilinear blending.

    Points inside the footprint but beyond the outermost node row or column
    take the edge values along that axis.

    Args:
        grid: Source grid
        lat: Query latitude(s)
        lon: Query longitude(s)

    Returns:
        Tuple of (i0, j0, ti, tj); the blend is
        (1-ti)(1-tj)f[i0,j0] + (1-ti)tj f[i0,j0+1] + ti(1-tj) f[i0+1,j0] + ti tj f[i0+1,j0+1]

    Raises:
        DomainError: If any point lies outside the grid footprint
    """
    inside = grid.contains(lat, lon)
    if not np.all(inside):
        n_out = int(np.size(inside) - np.count_nonzero(inside))
        raise DomainError(f"{n_out} query point(s) outside the grid footprint {grid.footprint()}")

    rows, cols = grid.fractional_index(lat, lon)
    rows = np.clip(_snap_to_nodes(rows), 0.0, grid.H - 1)
    cols = np.clip(_snap_to_nodes(cols), 0.0, grid.W - 1)

    i0 = np.minimum(np.floor(rows).astype(np.int64), grid.H - 2)
    j0 = np.minimum(np.floor(cols).astype(np.int64), grid.W - 2)
    return i0, j0, rows - i0, cols - j0


def _snap_to_nodes(index: np.ndarray) -> np.ndarray:
    # node coordinates rebuilt from lat0 + k*dlat must hit index k exactly
    nearest = np.round(index)
    return np.where(np.abs(index - nearest) < _EDGE_TOLERANCE, nearest, index)


def _blend(data: np.ndarray, i0, j0, ti, tj) -> np.ndarray:
    ti = np.asarray(ti)[..., None]
    tj = np.asarray(tj)[..., None]
    return (
        (1.0 - ti) * (1.0 - tj) * data[i0, j0]
        + (1.0 - ti) * tj * data[i0, j0 + 1]
        + ti * (1.0 - tj) * data[i0 + 1, j0]
        + ti * tj * data[i0 + 1, j0 + 1]
    )


def sample_points(field: Field, lat: Any, lon: Any) -> np.ndarray:
    """
    Bilinear values of every channel at a set of points.

    Args:
        field: Field to sample
        lat: Latitudes, any shape
        lon: Longitudes, same shape as lat

    Returns:
        Array of shape lat.shape + (C,)
    """
    i0, j0, ti, tj = bilinear_weights(field.grid, lat, lon)
    return _blend(field.data, i0, j0, ti, tj)


def bilinear_sample(field: Field, lat: float, lon: float, channel: int) -> float:
    """
    Bilinear value of one channel at one point.

    Args:
        field: Field to sample
        lat: Latitude in degrees
        lon: Longitude in degrees
        channel: Channel index

    Returns:
        Interpolated value (exact at nodes)
    """
    if not 0 <= channel < field.n_channels:
        raise ArgumentError(f"Channel index {channel} out of range for {field.n_channels} channels")
    return float(sample_points(field, lat, lon)[channel])


def upsample_bilinear(field: Field, target: Grid) -> Field:
    """
    Resample a field onto another grid by bilinear interpolation.

    Args:
        field: Source field
        target: Target grid, its nodes inside the source footprint

    Returns:
        Field on the target grid
    """
    lat2d, lon2d = np.meshgrid(target.lats, target.lons, indexing="ij")
    try:
        values = sample_points(field, lat2d, lon2d)
    except DomainError as e:
        raise DomainError(f"Target grid exceeds source coverage: {e}") from None
    return Field(target, field.channels, values)


@dataclass(frozen=True)
class StandardizationStats:
    """Per-channel mean and standard deviation."""

    mean: dict[str, float]
    std: dict[str, float]

    def __post_init__(self) -> None:
        for name, s in self.std.items():
            if not (np.isfinite(s) and s > 0):
                raise ConfigError(f"Standard deviation for channel '{name}' must be > 0, got {s}")
        if set(self.mean) != set(self.std):
            raise ConfigError("Mean and std must cover the same channels")

    def vectors(self, names: Iterable[str]) -> tuple[np.ndarray, np.ndarray]:
        """
        Mean and std arrays in channel order.

        Args:
            names: Channel names

        Returns:
            Tuple of (mean, std) arrays

        Raises:
            ConfigError: If a channel has no statistics
        """
        names = list(names)
        missing = [n for n in names if n not in self.mean]
        if missing:
            raise ConfigError(f"No standardization statistics for channel(s) {missing}")
        return (
            np.array([self.mean[n] for n in names], dtype=np.float64),
            np.array([self.std[n] for n in names], dtype=np.float64),
        )

    def to_dict(self) -> dict[str, Any]:
        return {"mean": dict(self.mean), "std": dict(self.std)}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "StandardizationStats":
        return cls(
            mean={k: float(v) for k, v in data["mean"].items()},
            std={k: float(v) for k, v in data["std"].items()},
        )


def standardize(field: Field, stats: StandardizationStats) -> Field:
    """Per-channel (x - mean) / std."""
    mean, std = stats.vectors(field.names)
    return field.with_data((field.data - mean) / std)


def destandardize(field: Field, stats: StandardizationStats) -> Field:
    """Inverse of standardize: x * std + mean."""
    mean, std = stats.vectors(field.names)
    return field.with_data(field.data * std + mean)


def compute_stats(fields: Sequence[Field]) -> StandardizationStats:
    """
    Per-channel mean and population std over all grid points and samples.

    Args:
        fields: Non-empty sequence of fields with identical channel names

    Returns:
        StandardizationStats

    Raises:
        ConfigError: If a channel has zero variance
    """
    if not fields:
        raise ArgumentError("compute_stats needs at least one field")
    names = fields[0].names
    for f in fields[1:]:
        if f.names != names:
            raise ArgumentError(f"Inconsistent channels: {f.names} vs {names}")

    stacked = np.concatenate([f.data.reshape(-1, len(names)) for f in fields], axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)

    logger.info(f"Computed standardization stats over {len(fields)} field(s)")
    zero = [n for n, s in zip(names, std) if s <= 0]
    if zero:
        raise ConfigError(f"Zero variance in channel(s) {zero}; std must be > 0")

    return StandardizationStats(
        mean={n: float(m) for n, m in zip(names, mean)},
        std={n: float(s) for n, s in zip(names, std)},
    )
