"""Pipeline commands behind the DeskDownscale command line.

Every ``cmd_*`` function returns a process exit code. ``run_command`` maps
the error hierarchy to exit codes: 0 success, 1 check failure, 2 usage or
input error, 3 runtime abort.
"""

import sys
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

from .conditioning import condition_field, standardized_condition
from .config import ConfigManager
from .errors import (
    ArgumentError,
    ConfigError,
    DownscaleError,
    NoStationsError,
    SamplingAborted,
    TrainingAborted,
)
from .grid import Grid, destandardize, standardize, upsample_bilinear
from .network import UNetRawNet, count_parameters
from .oracle_checks import CHECKS, CheckOptions, format_table, run_checks
from .sampler import (
    CHILD_SEED_ALGORITHM,
    GaussianTaskSpec,
    NetworkDenoiser,
    OracleDenoiser,
    RegressionPredictor,
    child_seed,
    sample_ensemble,
)
from .storage import load_checkpoint, read_ensemble, save_checkpoint, write_ensemble
from .synth import (
    Dataset,
    TerrainTaskSpec,
    TimeAxis,
    gen_gaussian_task,
    gen_stations,
    gen_terrain_task,
    read_dataset,
    write_dataset,
)
from .trainer import TrainingPair, train, write_loss_csv
from .utils import get_logger, hash_file, write_json
from .verify import ForecastCase, read_observations, score_cases

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INPUT_ERROR = 2
EXIT_ABORTED = 3

# Seed stream offsets derived from the run seed
STATION_STREAM = 1

RUN_RECORD = "{command}.run.json"
LOSS_FILE = "loss.csv"
SCORES_CSV = "scores.csv"
SCORES_JSON = "scores.json"


def run_command(func: Callable[..., int], *args: Any, verbose: bool = False, **kwargs: Any) -> int:
    """
    Run a command and translate failures into exit codes.

    Args:
        func: Command function
        verbose: Log tracebacks
        *args, **kwargs: Forwarded to func

    Returns:
        Exit code
    """
    try:
        return func(*args, **kwargs)
    except (TrainingAborted, SamplingAborted, NoStationsError) as e:
        logger.error(f"Aborted: {e}", exc_info=verbose)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ABORTED
    except (DownscaleError, OSError) as e:
        logger.error(f"Input error: {e}", exc_info=verbose)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT_ERROR


def _write_run_record(out_dir: Path, command: str, config: ConfigManager, seed: Optional[int],
                      extra: Optional[dict[str, Any]] = None) -> None:
    record = {
        "command": command,
        "seed": seed,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
    }
    record.update(extra or {})
    write_json(out_dir / RUN_RECORD.format(command=command), record)


def _fine_grid(config: ConfigManager) -> Grid:
    data = config.get("data", {})
    size = int(data["fine"])
    return Grid(float(data["lat0"]), float(data["lon0"]), float(data["dlat"]), float(data["dlon"]), size, size)


def build_dataset(config: ConfigManager, seed: int) -> Dataset:
    """
    Generate the dataset described by the ``data`` section, with stations.

    Stations observe the test-split truths (all truths when there is no
    test split).
    """
    data = config.get("data", {})
    fine_grid = _fine_grid(config)
    factor = int(data["factor"])
    fine_grid.coarsened(factor)  # raises unless factor divides the grid
    times = TimeAxis(str(data["start_time"]), tuple(data["lead_times_h"]))
    count, test_count = int(data["train_count"]), int(data["test_count"])

    if data["task"] == "gaussian":
        p = data["gaussian"]
        spec = GaussianTaskSpec(fine_grid, factor, p["gain"], p["offset"], p["noise_std"])
        dataset = gen_gaussian_task(spec, count, seed, test_count, times)
    elif data["task"] == "terrain":
        p = data["terrain"]
        spec = TerrainTaskSpec(fine_grid, factor, float(p["roughness"]), float(p["bias"]),
                               float(p["spectral_slope"]), float(p["relief_km"]), float(p["lapse_rate"]))
        dataset = gen_terrain_task(spec, count, seed, test_count, times)
    else:
        raise ConfigError(f"Unknown task '{data['task']}' (expected gaussian or terrain)")

    observed = dataset.split("test") or dataset.split("train")
    dataset.observations = gen_stations(
        [(s.valid_time, s.fine) for s in observed],
        int(data["n_stations"]),
        float(data["obs_noise_std"]),
        child_seed(seed, STATION_STREAM),
    )
    return dataset


def cmd_gen_data(config: ConfigManager, seed: int) -> int:
    """Generate a synthetic dataset with stations into ``paths.dataset``."""
    root = Path(config.get("paths.dataset"))
    dataset = build_dataset(config, seed)
    write_dataset(root, dataset)
    _write_run_record(root, "gen-data", config, seed)

    m = dataset.manifest
    print(f"{m.task} dataset: {m.count} pairs ({len(m.splits['train'])} train, {len(m.splits['test'])} test)")
    print(f"  fine {m.fine_grid.H}x{m.fine_grid.W}, coarse {m.coarse_grid.H}x{m.coarse_grid.W}, factor {m.factor}")
    print(f"  {len(dataset.observations)} observations -> {root}")
    return EXIT_OK


def training_pairs(dataset: Dataset, split: str = "train") -> list[TrainingPair]:
    """Standardized (conditioning, target) pairs of a dataset split."""
    m = dataset.manifest
    return [
        TrainingPair(
            cond=standardized_condition(s.coarse, m.fine_grid, m.stats),
            target=standardize(s.fine, m.stats),
            sample_id=s.sample_id,
        )
        for s in dataset.split(split)
    ]


def cmd_train(config: ConfigManager, seed: int) -> int:
    """Train a denoiser; writes the checkpoint and ``loss.csv``."""
    run = config.get_run_config()
    dataset = read_dataset(run.dataset)
    net_cfg = config.get_net_config()
    train_cfg = config.get_train_config()

    pairs = training_pairs(dataset)
    result = train(pairs, dataset.statics, net_cfg, config.get_edm_config(), train_cfg, seed)

    meta = {
        "objective": train_cfg.objective,
        "seed": seed,
        "steps": train_cfg.steps,
        "config_hash": config.config_hash(),
        "stats": dataset.manifest.stats.to_dict(),
    }
    save_checkpoint(run.checkpoint, result.model, meta)
    write_loss_csv(run.output_dir / LOSS_FILE, result.trace)
    _write_run_record(run.output_dir, "train", config, seed, {
        "checkpoint": str(run.checkpoint),
        "checkpoint_sha256": hash_file(run.checkpoint),
        "parameters": count_parameters(net_cfg),
    })

    print(f"trained {train_cfg.objective} model for {train_cfg.steps} steps: "
          f"loss {result.initial_loss:.6g} -> {result.final_loss:.6g}")
    print(f"  checkpoint {run.checkpoint}, trace {run.output_dir / LOSS_FILE}")
    return EXIT_OK


def _parse_task_params(task_params: Optional[dict[str, Any]], dataset: Dataset) -> GaussianTaskSpec:
    if not task_params:
        return dataset.gaussian_spec
    m = dataset.manifest
    base = dataset.gaussian_spec if m.task == "gaussian" else GaussianTaskSpec(m.fine_grid, m.factor)
    return GaussianTaskSpec(
        m.fine_grid, m.factor,
        task_params.get("gain", base.gain),
        task_params.get("offset", base.offset),
        task_params.get("noise_std", base.noise_std),
    )


def cmd_sample(config: ConfigManager, seed: int, task_params: Optional[dict[str, Any]] = None) -> int:
    """
    Draw an ensemble for every sample of the configured split.

    Writes ``<paths.ensemble>/<sample_id>/member_NNN.edf`` in physical units
    plus an ``ensemble.json`` sidecar per sample.
    """
    run = config.get_run_config()
    dataset = read_dataset(run.dataset)
    m = dataset.manifest
    schedule = config.get_schedule()
    state_names = [c.name for c in dataset.samples[0].fine.channels] if dataset.samples else []

    checkpoint_hash = None
    objective = None
    predictor = None
    if run.denoiser == "oracle":
        mean, std = m.stats.vectors(state_names)
        task = _parse_task_params(task_params, dataset)
        denoiser = OracleDenoiser(task.standardized(mean, std))
    else:
        model, meta = load_checkpoint(run.checkpoint)
        checkpoint_hash = hash_file(run.checkpoint)
        objective = meta.get("objective", "diffusion")
        if meta.get("stats") not in (None, m.stats.to_dict()):
            logger.warning(f"Checkpoint {run.checkpoint} was trained with different standardization stats")
        raw_net = UNetRawNet(model)
        denoiser = NetworkDenoiser(raw_net, config.get_edm_config())
        if objective == "regression":
            predictor = RegressionPredictor(raw_net)

    samples = dataset.split(run.split)
    if not samples:
        raise ArgumentError(f"Split '{run.split}' of {run.dataset} is empty")

    for j, s in enumerate(samples):
        cond = condition_field(standardized_condition(s.coarse, m.fine_grid, m.stats), dataset.statics)
        case_seed = child_seed(seed, j)
        if predictor is not None:
            ensemble = predictor.ensemble(cond, run.n, s.fine.channels)
        else:
            ensemble = sample_ensemble(denoiser, cond, schedule, run.n, case_seed,
                                       run.sampler, run.workers, s.fine.channels)

        members = [destandardize(member, m.stats) for member in ensemble.members]
        write_ensemble(run.ensemble / s.sample_id, members, {
            "sample_id": s.sample_id,
            "valid_time": s.valid_time,
            "lead_time_h": s.lead_time_h,
            "run_seed": seed,
            "base_seed": case_seed,
            "seeds": list(ensemble.seeds),
            "child_seed_algorithm": CHILD_SEED_ALGORITHM,
            "sampler": ensemble.sampler,
            "denoiser": run.denoiser,
            "objective": objective,
            "schedule": schedule.to_dict(),
            "checkpoint_sha256": checkpoint_hash,
            "config_hash": config.config_hash(),
        })
        logger.info(f"Sample {s.sample_id}: {ensemble.n} members written")

    _write_run_record(run.ensemble, "sample", config, seed, {"checkpoint_sha256": checkpoint_hash})
    print(f"sampled {len(samples)} ensemble(s) of {run.n} member(s) -> {run.ensemble}")
    return EXIT_OK


def cmd_evaluate(config: ConfigManager, observations_path: Optional[Path] = None) -> int:
    """
    Score the sampled ensembles against station observations.

    The baseline is the coarse forecast bilinearly upsampled to the fine grid.
    """
    run = config.get_run_config()
    dataset = read_dataset(run.dataset)
    m = dataset.manifest
    observations = read_observations(observations_path) if observations_path else dataset.observations

    cases = []
    sidecars = []
    for s in dataset.split(run.split):
        members, sidecar = read_ensemble(run.ensemble / s.sample_id)
        sidecars.append(sidecar)
        cases.append(ForecastCase(
            valid_time=s.valid_time,
            lead_time_h=s.lead_time_h,
            members=members,
            baseline=upsample_bilinear(s.coarse, m.fine_grid),
        ))
    if not cases:
        raise ArgumentError(f"Split '{run.split}' of {run.dataset} is empty")

    report = score_cases(cases, observations)
    report.metadata = {
        "split": run.split,
        "cases": len(cases),
        "members": len(cases[0].members),
        "sampler": sidecars[0].get("sampler"),
        "checkpoint_sha256": sidecars[0].get("checkpoint_sha256"),
        "config_hash": config.config_hash(),
    }
    report.write_csv(run.output_dir / SCORES_CSV)
    report.write_json(run.output_dir / SCORES_JSON)
    _write_run_record(run.output_dir, "evaluate", config, None,
                      {"observations": str(observations_path) if observations_path else None})

    print(f"{'variable':<10} {'lead_h':>6} {'n':>5} {'rmsess':>8} {'crpss':>8}")
    for c in report.cells:
        rmsess = "n/a" if c.rmsess is None else f"{c.rmsess:.3f}"
        crpss = "n/a" if c.crpss is None else f"{c.crpss:.3f}"
        print(f"{c.variable:<10} {c.lead_time_h:>6} {c.count:>5} {rmsess:>8} {crpss:>8}")
    if report.skipped_stations:
        print(f"{report.skipped_stations} station(s) outside the domain were skipped")
    return EXIT_OK


def cmd_oracle_check(config: ConfigManager, seed: int, list_only: bool = False,
                     only: Optional[Sequence[str]] = None, perturb_coeff: float = 0.0) -> int:
    """Run the analytic self-checks; exit 1 if any fails."""
    if list_only:
        for name in CHECKS:
            print(name)
        return EXIT_OK

    results = run_checks(only, CheckOptions(seed=seed, perturb_coeff=perturb_coeff))
    print(format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK_FAILED
