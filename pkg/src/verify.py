"""Forecast verification for DeskDownscale.

Ensemble CRPS (closed form), RMSE of the ensemble mean, skill scores against
a deterministic baseline, and bilinear collocation of gridded forecasts with
station observations. Wind speed is verified in speed space: every member's
speed is derived from its own interpolated u10/v10.
"""

import csv
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from .errors import ArgumentError, NoStationsError, UndefinedScoreError
from .grid import Field, sample_points
from .utils import get_logger, write_json

logger = get_logger(__name__)

VARIABLES = ("t2m", "wind_speed", "u10", "v10", "msl")
OBSERVATION_HEADER = ("station_id", "lat", "lon", "valid_time", "variable", "value")
REPORT_FIELDS = ("variable", "lead_time_h", "count", "rmse_base", "rmse_down",
                 "crps_base", "crps_down", "rmsess", "crpss")


@dataclass(frozen=True)
class Observation:
    """A single station observation."""

    station_id: str
    lat: float
    lon: float
    valid_time: str
    variable: str
    value: float

    def __post_init__(self) -> None:
        if self.variable not in VARIABLES:
            raise ArgumentError(f"Unknown observed variable '{self.variable}' (expected one of {VARIABLES})")
        if not all(math.isfinite(v) for v in (self.lat, self.lon, self.value)):
            raise ArgumentError(f"Non-finite observation at station {self.station_id}")


def write_observations(path: Path, observations: Sequence[Observation]) -> None:
    """Write observations as CSV ``station_id,lat,lon,valid_time,variable,value``."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(OBSERVATION_HEADER)
        for o in observations:
            writer.writerow([o.station_id, f"{o.lat:.17g}", f"{o.lon:.17g}", o.valid_time,
                             o.variable, f"{o.value:.17g}"])


def read_observations(path: Path) -> list[Observation]:
    """
    Read an observations CSV.

    Args:
        path: CSV file with the standard header

    Returns:
        List of observations in file order
    """
    with open(path, "r", newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != OBSERVATION_HEADER:
            raise ArgumentError(f"Unexpected observation header in {path}: {reader.fieldnames}")
        return [
            Observation(
                station_id=row["station_id"],
                lat=float(row["lat"]),
                lon=float(row["lon"]),
                valid_time=row["valid_time"],
                variable=row["variable"],
                value=float(row["value"]),
            )
            for row in reader
        ]


def _members(members: Sequence[float]) -> np.ndarray:
    values = np.asarray(members, dtype=np.float64).ravel()
    if values.size == 0:
        raise ArgumentError("Empty ensemble")
    if not np.all(np.isfinite(values)):
        raise ArgumentError("Ensemble contains non-finite values")
    return values


def crps_ensemble(members: Sequence[float], y: float) -> float:
    """
    Closed-form ensemble CRPS.

    (1/n) sum_k |x_k - y| - (1/(2 n^2)) sum_k sum_l |x_k - x_l|

    Args:
        members: Ensemble values
        y: Observation

    Returns:
        CRPS; for n = 1 this is |x_1 - y|
    """
    x = _members(members)
    n = x.size
    spread = np.abs(x[:, None] - x[None, :]).sum() / (2.0 * n * n)
    return float(np.abs(x - y).mean() - spread)


def crps_quadrature(members: Sequence[float], y: float) -> float:
    """
    CRPS as the integral of (F(z) - 1{z >= y})^2 over z.

    The integrand is piecewise constant between the sorted members and y, so
    summing it interval by interval integrates it exactly.
    """
    x = np.sort(_members(members))
    knots = np.sort(np.append(x, y))
    left = knots[:-1]
    width = np.diff(knots)
    cdf = np.searchsorted(x, left, side="right") / x.size
    step = (left >= y).astype(np.float64)
    return float(np.sum((cdf - step) ** 2 * width))


def rmse_of_mean(ensembles: Sequence[Sequence[float]], observations: Sequence[float]) -> float:
    """
    RMSE between ensemble means and observations.

    Args:
        ensembles: One member list per observation
        observations: Observed values

    Returns:
        sqrt(mean((mean_k x_k - y)^2))
    """
    if not ensembles or len(ensembles) != len(observations):
        raise ArgumentError(
            f"Need matching non-empty ensembles and observations, got {len(ensembles)} and {len(observations)}"
        )
    errors = np.array([_members(e).mean() - y for e, y in zip(ensembles, observations)])
    return float(np.sqrt(np.mean(errors ** 2)))


def skill_score(metric_down: float, metric_base: float) -> float:
    """
    Skill score 1 - down / base.

    Raises:
        UndefinedScoreError: If base <= 0
    """
    if not metric_base > 0:
        raise UndefinedScoreError(f"Skill score undefined for baseline metric {metric_base}")
    return 1.0 - metric_down / metric_base


def wind_speed(u10: Any, v10: Any) -> Any:
    """Wind speed sqrt(u^2 + v^2), scalar or elementwise."""
    speed = np.hypot(u10, v10)
    return float(speed) if np.ndim(speed) == 0 else speed


def deterministic_crps_baseline(forecast: float, y: float) -> float:
    """CRPS of a deterministic forecast: the absolute error."""
    return abs(float(forecast) - float(y))


def station_value(forecast: Field, obs: Observation) -> Optional[float]:
    """
    Forecast value of a field at an observation, or None when out of domain.

    Args:
        forecast: Forecast field in physical units
        obs: Observation giving location and variable

    Returns:
        Interpolated value (derived speed for wind_speed)
    """
    if not bool(forecast.grid.contains(obs.lat, obs.lon)):
        return None
    values = sample_points(forecast, obs.lat, obs.lon)
    if obs.variable == "wind_speed":
        return wind_speed(values[forecast.index("u10")], values[forecast.index("v10")])
    return float(values[forecast.index(obs.variable)])


@dataclass
class Collocation:
    """Matched (forecast, observation) pairs plus the out-of-domain count."""

    pairs: list[tuple[float, float]] = field(default_factory=list)
    matched: list[Observation] = field(default_factory=list)
    skipped: int = 0


def collocate(forecast: Field, observations: Sequence[Observation]) -> Collocation:
    """
    Bilinearly collocate one forecast field with observations.

    Stations outside the grid footprint are skipped and counted.

    Args:
        forecast: Forecast field in physical units
        observations: Observations

    Returns:
        Collocation
    """
    result = Collocation()
    for obs in observations:
        value = station_value(forecast, obs)
        if value is None:
            result.skipped += 1
            continue
        result.pairs.append((value, obs.value))
        result.matched.append(obs)
    if result.skipped:
        logger.warning(f"{result.skipped} observation(s) outside the forecast domain were skipped")
    return result


@dataclass(frozen=True)
class ForecastCase:
    """Downscaled ensemble and deterministic baseline for one valid time."""

    valid_time: str
    lead_time_h: int
    members: Sequence[Field]
    baseline: Field


@dataclass(frozen=True)
class ScoreCell:
    variable: str
    lead_time_h: int
    count: int
    rmse_base: float
    rmse_down: float
    crps_base: float
    crps_down: float
    rmsess: Optional[float]
    crpss: Optional[float]


@dataclass
class ScoreReport:
    """Scores per (variable, lead time)."""

    cells: list[ScoreCell]
    skipped_stations: int = 0
    metadata: dict[str, Any] = field(default_factory=dict)

    def cell(self, variable: str, lead_time_h: int) -> ScoreCell:
        for c in self.cells:
            if c.variable == variable and c.lead_time_h == lead_time_h:
                return c
        raise KeyError(f"No score cell for ({variable}, {lead_time_h})")

    def to_dict(self) -> dict[str, Any]:
        return {
            "cells": [asdict(c) for c in self.cells],
            "skipped_stations": self.skipped_stations,
            "metadata": dict(self.metadata),
        }

    def write_csv(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(REPORT_FIELDS)
            for c in self.cells:
                row = asdict(c)
                writer.writerow(["" if row[k] is None else _fmt(row[k]) for k in REPORT_FIELDS])

    def write_json(self, path: Path) -> None:
        write_json(path, self.to_dict())


def _fmt(value: Any) -> str:
    return f"{value:.17g}" if isinstance(value, float) else str(value)


def _optional_skill(down: float, base: float) -> Optional[float]:
    try:
        return skill_score(down, base)
    except UndefinedScoreError:
        return None


def score_cases(cases: Sequence[ForecastCase], observations: Sequence[Observation]) -> ScoreReport:
    """
    Score downscaled ensembles against a deterministic baseline.

    Aggregation is over stations, per (variable, lead time), in a fixed order.

    Args:
        cases: Forecast cases, one per valid time
        observations: Observations for any of the valid times

    Returns:
        ScoreReport

    Raises:
        NoStationsError: If no observation could be collocated
    """
    by_time: dict[str, list[Observation]] = defaultdict(list)
    for obs in observations:
        by_time[obs.valid_time].append(obs)

    down: dict[tuple[str, int], list[np.ndarray]] = defaultdict(list)
    base: dict[tuple[str, int], list[float]] = defaultdict(list)
    truth: dict[tuple[str, int], list[float]] = defaultdict(list)
    skipped_stations: set[str] = set()

    for case in cases:
        for obs in by_time.get(case.valid_time, []):
            member_values = [station_value(m, obs) for m in case.members]
            base_value = station_value(case.baseline, obs)
            if base_value is None or any(v is None for v in member_values):
                skipped_stations.add(obs.station_id)
                continue
            key = (obs.variable, int(case.lead_time_h))
            down[key].append(np.array(member_values, dtype=np.float64))
            base[key].append(base_value)
            truth[key].append(obs.value)

    if skipped_stations:
        logger.warning(f"{len(skipped_stations)} station(s) outside the forecast domain were skipped")
    if not truth:
        raise NoStationsError("No observation could be collocated with the forecasts")

    cells = []
    for key in sorted(truth, key=lambda k: (VARIABLES.index(k[0]), k[1])):
        obs_values = truth[key]
        rmse_down = rmse_of_mean(down[key], obs_values)
        rmse_base = rmse_of_mean([[b] for b in base[key]], obs_values)
        crps_down = float(np.mean([crps_ensemble(e, y) for e, y in zip(down[key], obs_values)]))
        crps_base = float(np.mean([deterministic_crps_baseline(b, y) for b, y in zip(base[key], obs_values)]))
        cells.append(ScoreCell(
            variable=key[0],
            lead_time_h=key[1],
            count=len(obs_values),
            rmse_base=rmse_base,
            rmse_down=rmse_down,
            crps_base=crps_base,
            crps_down=crps_down,
            rmsess=_optional_skill(rmse_down, rmse_base),
            crpss=_optional_skill(crps_down, crps_base),
        ))

    return ScoreReport(cells=cells, skipped_stations=len(skipped_stations))
