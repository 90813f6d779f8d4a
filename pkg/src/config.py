"""Configuration management for DeskDownscale."""

import copy
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Optional

from .edm import EdmConfig
from .errors import ConfigError
from .network import NetConfig
from .sampler import SAMPLER_KINDS, SigmaSchedule, edm_schedule
from .trainer import TrainConfig
from .utils import get_logger, hash_json, write_json

logger = get_logger(__name__)

SEED_ENV_VAR = "EDM_SEED"

DENOISER_KINDS = ("network", "oracle")
TASK_KINDS = ("gaussian", "terrain")

DEFAULT_CONFIG = {
    "seed": None,
    "paths": {
        "dataset": "data",
        "checkpoint": "runs/model.edp",
        "output_dir": "runs",
        "ensemble": "runs/ensemble",
    },
    "data": {
        "task": "gaussian",
        "fine": 32,
        "factor": 4,
        "lat0": 52.0,
        "lon0": 4.0,
        "dlat": -0.05,
        "dlon": 0.05,
        "train_count": 64,
        "test_count": 16,
        "n_stations": 40,
        "obs_noise_std": 0.0,
        "lead_times_h": [6, 12, 24, 48],
        "start_time": "2024-01-01T00:00:00",
        "gaussian": {
            "gain": 1.0,
            "offset": 0.5,
            "noise_std": 1.0,
        },
        "terrain": {
            "roughness": 0.5,
            "bias": 1.0,
            "spectral_slope": 3.0,
            "relief_km": 2.0,
            "lapse_rate": 6.5,
        },
    },
    "net": NetConfig().to_dict(),
    "edm": {
        "sigma_data": 0.5,
        "p_mean": -0.5,
        "p_std": 1.5,
    },
    "schedule": {
        "steps": 128,
        "sigma_min": 0.002,
        "sigma_max": 80.0,
        "rho": 7.0,
    },
    "train": {
        "steps": 2000,
        "lr": 1e-4,
        "weight_decay": 1e-5,
        "lr_floor": 1e-5,
        "augment": True,
        "objective": "diffusion",
        "sigma_fixed": None,
        "overfit_one": False,
        "overfit_sigma": 0.5,
        "overfit_lr": 2e-3,
        "overfit_lr_floor": 2e-4,
        "log_every": 100,
        "threads": 1,
    },
    "sample": {
        "n": 16,
        "sampler": "ode",
        "workers": 1,
        "denoiser": "network",
        "split": "test",
    },
    "verbose_logging": False,
}


@dataclass(frozen=True)
class RunConfig:
    """Paths and run-level knobs shared by the pipeline commands."""

    dataset: Path
    checkpoint: Path
    output_dir: Path
    ensemble: Path
    n: int
    sampler: str
    workers: int
    denoiser: str
    split: str

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ConfigError(f"Ensemble size must be >= 1, got {self.n}")
        if self.workers < 1:
            raise ConfigError(f"Worker count must be >= 1, got {self.workers}")
        if self.sampler not in SAMPLER_KINDS:
            raise ConfigError(f"Unknown sampler '{self.sampler}' (expected one of {SAMPLER_KINDS})")
        if self.denoiser not in DENOISER_KINDS:
            raise ConfigError(f"Unknown denoiser '{self.denoiser}' (expected one of {DENOISER_KINDS})")
        if self.split not in ("train", "test"):
            raise ConfigError(f"Unknown split '{self.split}'")


class ConfigManager:
    """
    Layered run configuration: defaults < JSON file < command-line overrides.

    The file is read once; the command line never writes it back. Artifacts
    embed ``to_dict()`` and ``config_hash()`` instead.
    """

    def __init__(self, config_path: Optional[Path] = None) -> None:
        """
        Initialize the configuration manager.

        Args:
            config_path: Optional JSON file merged over the defaults
        """
        self.config_path = config_path
        self._config: dict[str, Any] = {}
        self._load()

    def _load(self) -> None:
        """Load configuration from file, or use defaults when no file is given."""
        if self.config_path is None:
            self._config = copy.deepcopy(DEFAULT_CONFIG)
            return

        if not self.config_path.exists():
            raise ConfigError(f"Config file not found: {self.config_path}")

        try:
            with open(self.config_path, "r", encoding="utf-8") as f:
                loaded_config = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Invalid JSON in config file {self.config_path}: {e}") from e

        if not isinstance(loaded_config, dict):
            raise ConfigError(f"Config file {self.config_path} must hold a JSON object")

        self._config = self._merge_defaults(loaded_config)
        logger.info(f"Configuration loaded from {self.config_path}")

    def _merge_defaults(self, loaded: dict[str, Any]) -> dict[str, Any]:
        """
        Merge loaded config with defaults, preserving loaded values.

        Args:
            loaded: The loaded configuration dict

        Returns:
            Merged configuration with all required keys
        """
        return _deep_merge(copy.deepcopy(DEFAULT_CONFIG), loaded)

    def save(self, path: Path) -> None:
        """Write the effective configuration as JSON."""
        write_json(path, self._config)
        logger.info(f"Effective configuration written to {path}")

    def get(self, key: str, default: Any = None) -> Any:
        """
        Get a configuration value.

        Args:
            key: The configuration key (supports dot notation for nested keys)
            default: Default value if key not found

        Returns:
            The configuration value or default
        """
        value = self._config
        for k in key.split("."):
            if isinstance(value, dict) and k in value:
                value = value[k]
            else:
                return default
        return value

    def set(self, key: str, value: Any) -> None:
        """
        Set a configuration value in memory.

        Args:
            key: The configuration key (supports dot notation for nested keys)
            value: The value to set
        """
        keys = key.split(".")
        config = self._config

        for k in keys[:-1]:
            if not isinstance(config.get(k), dict):
                config[k] = {}
            config = config[k]

        old_value = config.get(keys[-1])
        config[keys[-1]] = value
        if old_value != value:
            logger.debug(f"Configuration changed: {key} = {value} (was: {old_value})")

    def apply_overrides(self, overrides: Mapping[str, Any]) -> None:
        """
        Apply command-line overrides; None means the flag was not given.

        Args:
            overrides: Mapping of dotted key to value
        """
        for key, value in overrides.items():
            if value is not None:
                self.set(key, value)

    def resolve_seed(self, flag: Optional[int] = None) -> int:
        """
        Effective seed: flag, then config, then $EDM_SEED, then 0.

        Args:
            flag: Seed given on the command line

        Returns:
            The seed
        """
        if flag is not None:
            return int(flag)
        if self.get("seed") is not None:
            return int(self.get("seed"))
        env_seed = os.environ.get(SEED_ENV_VAR)
        if env_seed:
            try:
                return int(env_seed)
            except ValueError:
                raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got '{env_seed}'") from None
        return 0

    def get_net_config(self) -> NetConfig:
        """Network architecture from the ``net`` section."""
        try:
            return NetConfig.from_dict(self.get("net", {}))
        except TypeError as e:
            raise ConfigError(f"Invalid net section: {e}") from e

    def get_edm_config(self) -> EdmConfig:
        """EDM constants from the ``edm`` section."""
        edm = self.get("edm", {})
        try:
            return EdmConfig(
                sigma_data=float(edm["sigma_data"]),
                p_mean=float(edm["p_mean"]),
                p_std=float(edm["p_std"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"Invalid edm section: {e}") from e

    def get_schedule(self) -> SigmaSchedule:
        """Sampling noise schedule from the ``schedule`` section."""
        sched = self.get("schedule", {})
        try:
            return edm_schedule(
                int(sched["steps"]),
                float(sched["sigma_min"]),
                float(sched["sigma_max"]),
                float(sched["rho"]),
            )
        except (KeyError, TypeError) as e:
            raise ConfigError(f"Invalid schedule section: {e}") from e
        except ValueError as e:
            raise ConfigError(f"Invalid schedule: {e}") from e

    def get_train_config(self) -> TrainConfig:
        """Optimizer and loop settings from the ``train`` section."""
        train = self.get("train", {})
        sigma_fixed = train.get("sigma_fixed")
        try:
            return TrainConfig(
                steps=int(train["steps"]),
                lr=float(train["lr"]),
                weight_decay=float(train["weight_decay"]),
                lr_floor=float(train["lr_floor"]),
                augment=bool(train["augment"]),
                objective=str(train["objective"]),
                sigma_fixed=None if sigma_fixed is None else float(sigma_fixed),
                overfit_one=bool(train["overfit_one"]),
                overfit_sigma=float(train["overfit_sigma"]),
                overfit_lr=float(train["overfit_lr"]),
                overfit_lr_floor=float(train["overfit_lr_floor"]),
                log_every=int(train["log_every"]),
                threads=int(train["threads"]),
            )
        except (KeyError, TypeError) as e:
            raise ConfigError(f"Invalid train section: {e}") from e

    def get_run_config(self) -> RunConfig:
        """Paths and sampling knobs from the ``paths`` and ``sample`` sections."""
        paths = self.get("paths", {})
        sample = self.get("sample", {})
        try:
            return RunConfig(
                dataset=Path(paths["dataset"]),
                checkpoint=Path(paths["checkpoint"]),
                output_dir=Path(paths["output_dir"]),
                ensemble=Path(paths["ensemble"]),
                n=int(sample["n"]),
                sampler=str(sample["sampler"]),
                workers=int(sample["workers"]),
                denoiser=str(sample["denoiser"]),
                split=str(sample["split"]),
            )
        except (KeyError, TypeError) as e:
            raise ConfigError(f"Invalid paths/sample section: {e}") from e

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON of the effective configuration."""
        return hash_json(self._config)

    def to_dict(self) -> dict[str, Any]:
        """
        Get a copy of the full configuration.

        Returns:
            Copy of the configuration dictionary
        """
        return copy.deepcopy(self._config)


def _deep_merge(base: dict[str, Any], update: Mapping[str, Any]) -> dict[str, Any]:
    # unknown keys are kept
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            base[key] = _deep_merge(base[key], value)
        else:
            base[key] = value
    return base
