"""Shared fixtures for the DeskDownscale test suite."""

import numpy as np
import pytest

from src.grid import Channel, Field, Grid
from src.utils import STATE_CHANNELS


def make_field(grid: Grid, data: np.ndarray, names=None) -> Field:
    """Field on ``grid`` with generic channel names c0, c1, ..."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 2:
        data = data[:, :, None]
    names = names or [f"c{i}" for i in range(data.shape[-1])]
    return Field(grid, tuple(Channel(n, "1") for n in names), data)


def state_field(grid: Grid, data: np.ndarray) -> Field:
    """Field with the standard t2m/u10/v10/msl channels."""
    return Field(grid, tuple(Channel(*c) for c in STATE_CHANNELS), data)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def grid8() -> Grid:
    return Grid(lat0=52.0, lon0=4.0, dlat=-0.05, dlon=0.05, H=8, W=8)


@pytest.fixture
def grid16() -> Grid:
    return Grid(lat0=52.0, lon0=4.0, dlat=-0.05, dlon=0.05, H=16, W=16)


@pytest.fixture
def unit_grid() -> Grid:
    """2x2 grid with unit spacing and nodes at 0 and 1."""
    return Grid(lat0=0.0, lon0=0.0, dlat=1.0, dlon=1.0, H=2, W=2)
