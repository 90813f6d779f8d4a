"""DeskDownscale - conditional diffusion downscaling at desk scale.

Entry point for the command line.
"""

import argparse
import json
import signal
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

from src import __version__
from src.commands import (
    EXIT_INPUT_ERROR,
    cmd_evaluate,
    cmd_gen_data,
    cmd_oracle_check,
    cmd_sample,
    cmd_train,
    run_command,
)
from src.config import DENOISER_KINDS, TASK_KINDS, ConfigManager
from src.errors import ArgumentError, ConfigError
from src.sampler import SAMPLER_KINDS
from src.trainer import OBJECTIVES
from src.utils import APP_NAME, LOG_FILE_NAME, add_log_file, get_logger, set_log_level, setup_logging

# Command-line flag -> dotted config key, per command
OVERRIDES = {
    "gen-data": {
        "task": "data.task",
        "fine": "data.fine",
        "factor": "data.factor",
        "train_count": "data.train_count",
        "test_count": "data.test_count",
        "stations": "data.n_stations",
        "obs_noise": "data.obs_noise_std",
        "out": "paths.dataset",
    },
    "train": {
        "dataset": "paths.dataset",
        "checkpoint": "paths.checkpoint",
        "output_dir": "paths.output_dir",
        "steps": "train.steps",
        "lr": "train.lr",
        "objective": "train.objective",
        "sigma_fixed": "train.sigma_fixed",
        "overfit_one": "train.overfit_one",
        "augment": "train.augment",
        "threads": "train.threads",
    },
    "sample": {
        "dataset": "paths.dataset",
        "checkpoint": "paths.checkpoint",
        "ensemble_dir": "paths.ensemble",
        "n": "sample.n",
        "sampler": "sample.sampler",
        "workers": "sample.workers",
        "denoiser": "sample.denoiser",
        "split": "sample.split",
        "schedule_steps": "schedule.steps",
    },
    "evaluate": {
        "dataset": "paths.dataset",
        "ensemble_dir": "paths.ensemble",
        "output_dir": "paths.output_dir",
        "split": "sample.split",
    },
    "oracle-check": {},
}


class DeskDownscale:
    """Main application coordinator."""

    def __init__(self, args: argparse.Namespace) -> None:
        """
        Initialize logging and the layered configuration for one command.

        Args:
            args: Parsed command line
        """
        # Initialize logging first (starts in quiet mode)
        setup_logging()

        self.args = args
        self.command: str = args.command

        # defaults < --config file < flags
        self.config = ConfigManager(args.config)
        self.config.apply_overrides(self._flag_overrides())
        set_log_level(bool(args.verbose or self.config.get("verbose_logging", False)))

        self.logger = get_logger(__name__)
        self.seed = self.config.resolve_seed(args.seed)

        if self.command != "oracle-check":
            add_log_file(Path(self.config.get("paths.output_dir")) / LOG_FILE_NAME)

        self.logger.info(f"Starting {APP_NAME} {__version__}: {self.command} (seed {self.seed})")

    def _flag_overrides(self) -> dict[str, Any]:
        values = vars(self.args)
        overrides = {key: values.get(flag) for flag, key in OVERRIDES[self.command].items()}
        for key in ("paths.dataset", "paths.checkpoint", "paths.output_dir", "paths.ensemble"):
            if overrides.get(key) is not None:
                overrides[key] = str(overrides[key])
        return overrides

    def _task_params(self) -> Optional[dict[str, Any]]:
        raw = getattr(self.args, "task_params", None)
        if raw is None:
            return None
        try:
            params = json.loads(raw)
        except json.JSONDecodeError as e:
            raise ArgumentError(f"--task-params is not valid JSON: {e}") from None
        if not isinstance(params, dict):
            raise ArgumentError("--task-params must be a JSON object")
        return params

    def _dispatch(self) -> int:
        if self.command == "gen-data":
            return cmd_gen_data(self.config, self.seed)
        if self.command == "train":
            return cmd_train(self.config, self.seed)
        if self.command == "sample":
            return cmd_sample(self.config, self.seed, self._task_params())
        if self.command == "evaluate":
            return cmd_evaluate(self.config, self.args.observations)
        return cmd_oracle_check(self.config, self.seed, self.args.list, self.args.only, self.args.perturb_coeff)

    def run(self) -> int:
        """Run the command and return its exit code."""
        code = run_command(self._dispatch, verbose=bool(self.args.verbose))
        self.logger.info(f"{self.command} finished with exit code {code}")
        return code


def build_parser() -> argparse.ArgumentParser:
    """Command-line parser with one subcommand per pipeline stage."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config merged over the defaults")
    common.add_argument("--verbose", action="store_true", help="Log at INFO level")
    common.add_argument("--seed", type=int, help="Run seed (default: config, then $EDM_SEED, then 0)")

    parser = argparse.ArgumentParser(prog="deskdownscale", description=f"{APP_NAME} {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", parents=[common], help="Generate a synthetic dataset with stations")
    gen.add_argument("--task", choices=TASK_KINDS)
    gen.add_argument("--fine", type=int, help="Fine grid size (square)")
    gen.add_argument("--factor", type=int, help="Coarsening factor")
    gen.add_argument("--train-count", type=int)
    gen.add_argument("--test-count", type=int)
    gen.add_argument("--stations", type=int, help="Number of synthetic stations")
    gen.add_argument("--obs-noise", type=float, help="Observation error std")
    gen.add_argument("--out", type=Path, help="Dataset directory")

    train = sub.add_parser("train", parents=[common], help="Train a denoiser")
    train.add_argument("--dataset", type=Path)
    train.add_argument("--checkpoint", type=Path)
    train.add_argument("--output-dir", type=Path)
    train.add_argument("--steps", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--objective", choices=OBJECTIVES)
    train.add_argument("--sigma-fixed", type=float, help="Train at a single noise level")
    train.add_argument("--overfit-one", action="store_true", default=None,
                       help="Train on the first pair only, at sigma train.overfit_sigma without augmentation, "
                            "with lr train.overfit_lr annealed to train.overfit_lr_floor")
    train.add_argument("--no-augment", dest="augment", action="store_false", default=None,
                       help="Disable spectral-smoothing augmentation")
    train.add_argument("--threads", type=int)

    sample = sub.add_parser("sample", parents=[common], help="Draw downscaled ensembles")
    sample.add_argument("--dataset", type=Path)
    sample.add_argument("--checkpoint", type=Path)
    sample.add_argument("--ensemble-dir", type=Path)
    sample.add_argument("--n", type=int, help="Ensemble size")
    sample.add_argument("--sampler", choices=SAMPLER_KINDS)
    sample.add_argument("--workers", type=int)
    sample.add_argument("--denoiser", choices=DENOISER_KINDS)
    sample.add_argument("--task-params", help='Oracle task as JSON, e.g. \'{"gain": 1, "offset": 0.5}\'')
    sample.add_argument("--split", choices=("train", "test"))
    sample.add_argument("--schedule-steps", type=int)

    evaluate = sub.add_parser("evaluate", parents=[common], help="Score ensembles against stations")
    evaluate.add_argument("--dataset", type=Path)
    evaluate.add_argument("--ensemble-dir", type=Path)
    evaluate.add_argument("--output-dir", type=Path)
    evaluate.add_argument("--observations", type=Path, help="Observation CSV (default: the dataset's)")
    evaluate.add_argument("--split", choices=("train", "test"))

    check = sub.add_parser("oracle-check", parents=[common], help="Run the analytic self-checks")
    check.add_argument("--list", action="store_true", help="List checks without running them")
    check.add_argument("--only", action="append", metavar="NAME", help="Run only this check (repeatable)")
    check.add_argument("--perturb-coeff", type=float, default=0.0, metavar="EPS",
                       help="Fault injection: scale c_skip by (1 + EPS)")

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Application entry point."""
    args = build_parser().parse_args(argv)

    try:
        app = DeskDownscale(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT_ERROR

    # Handle SIGINT gracefully
    def signal_handler(sig, frame):
        app.logger.info("Interrupted")
        sys.exit(130)

    signal.signal(signal.SIGINT, signal_handler)

    return app.run()


if __name__ == "__main__":
    sys.exit(main())
