"""Training loop for the DeskDownscale denoiser.

Batch size 1: each step draws one (coarse, fine) pair, a smoothing strength,
a noise level and a noise realization, then takes one AdamW step with a
cosine-annealed learning rate.
"""

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .conditioning import condition_input
from .edm import EdmConfig, denoising_loss, sample_train_sigma
from .errors import ArgumentError, ConfigError, TrainingAborted
from .grid import Field
from .network import DownscalingUNet, NetConfig, UNetRawNet, build_model, count_parameters
from .spectral import sample_alpha
from .utils import get_logger

logger = get_logger(__name__)

OBJECTIVES = ("diffusion", "regression")
LOSS_CSV_HEADER = ("step", "sigma", "alpha", "loss", "lr")

# Nominal noise level of the regression objective (c_noise = ln(1)/4 = 0)
REGRESSION_SIGMA = 1.0


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loop settings."""

    steps: int = 2000
    lr: float = 1e-4
    weight_decay: float = 1e-5
    lr_floor: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    augment: bool = True
    objective: str = "diffusion"
    sigma_fixed: Optional[float] = None
    overfit_one: bool = False
    overfit_sigma: float = 0.5
    overfit_lr: float = 2e-3
    overfit_lr_floor: float = 2e-4
    log_every: int = 100
    threads: int = 1

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if not (self.lr > 0 and 0 <= self.lr_floor <= self.lr):
            raise ConfigError(f"Need 0 <= lr_floor <= lr and lr > 0, got lr={self.lr}, floor={self.lr_floor}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"Unknown objective '{self.objective}' (expected one of {OBJECTIVES})")
        if self.sigma_fixed is not None and not self.sigma_fixed > 0:
            raise ConfigError(f"sigma_fixed must be > 0, got {self.sigma_fixed}")
        if not (self.overfit_sigma > 0 and self.overfit_lr > 0 and 0 <= self.overfit_lr_floor <= self.overfit_lr):
            raise ConfigError("Need overfit_sigma > 0 and 0 <= overfit_lr_floor <= overfit_lr with overfit_lr > 0")
        if self.log_every < 1 or self.threads < 1:
            raise ConfigError("log_every and threads must be >= 1")

    @property
    def lr_schedule(self) -> tuple[float, float]:
        """Initial and final learning rate of the cosine schedule."""
        if self.overfit_one:
            return self.overfit_lr, self.overfit_lr_floor
        return self.lr, self.lr_floor

    @property
    def pinned_sigma(self) -> Optional[float]:
        """Noise level used at every step, or None when it is drawn per step."""
        if self.sigma_fixed is not None:
            return self.sigma_fixed
        return self.overfit_sigma if self.overfit_one else None

    @property
    def augmenting(self) -> bool:
        return self.augment and not self.overfit_one


@dataclass(frozen=True)
class TrainingPair:
    """One standardized training instance on the network grid."""

    cond: Field
    target: Field
    sample_id: str = ""


@dataclass(frozen=True)
class LossRecord:
    step: int
    sigma: float
    alpha: float
    loss: float
    lr: float


@dataclass
class TrainResult:
    """Trained model and its per-step loss trace."""

    model: DownscalingUNet
    trace: list[LossRecord] = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.trace[0].loss

    @property
    def final_loss(self) -> float:
        return self.trace[-1].loss


def cosine_lr(step: int, total_steps: int, base: float, floor: float) -> float:
    """
    Cosine-annealed learning rate: base at step 0, floor at the final step.

    Args:
        step: Zero-based step index
        total_steps: Total number of steps
        base: Initial learning rate
        floor: Final learning rate

    Returns:
        Learning rate for this step
    """
    if total_steps <= 1:
        return base
    t = min(max(step, 0), total_steps - 1) / (total_steps - 1)
    return floor + (base - floor) * 0.5 * (1.0 + math.cos(math.pi * t))


@dataclass
class OptimizerState:
    """
    AdamW moments and step counter around torch.optim.AdamW.

    The moment buffers live in ``optimizer.state``; the learning rate is set
    from the cosine schedule before every update.
    """

    optimizer: torch.optim.AdamW
    base_lr: float
    lr_floor: float
    step: int = 0

    @classmethod
    def create(cls, model: torch.nn.Module, cfg: TrainConfig) -> "OptimizerState":
        base_lr, lr_floor = cfg.lr_schedule
        optimizer = torch.optim.AdamW(
            model.parameters(),
            lr=base_lr,
            betas=cfg.betas,
            eps=cfg.eps,
            weight_decay=cfg.weight_decay,
        )
        return cls(optimizer=optimizer, base_lr=base_lr, lr_floor=lr_floor)


def adamw_step(model: torch.nn.Module, opt: OptimizerState, total_steps: int) -> float:
    """
    Apply one AdamW update using the gradients stored on the parameters.

    Args:
        model: Model whose ``.grad`` buffers hold the current gradients
        opt: Optimizer state (advanced in place)
        total_steps: Length of the cosine schedule

    Returns:
        The learning rate used

    Raises:
        ArgumentError: If the schedule is already exhausted
        TrainingAborted: If any gradient is non-finite
    """
    if opt.step >= total_steps:
        raise ArgumentError(f"Optimizer step {opt.step} is past the schedule length {total_steps}")

    for name, p in model.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise TrainingAborted(f"Non-finite gradient in '{name}'", opt.step)

    lr = cosine_lr(opt.step, total_steps, opt.base_lr, opt.lr_floor)
    for group in opt.optimizer.param_groups:
        group["lr"] = lr
    opt.optimizer.step()
    opt.step += 1

    if hasattr(model, "revision"):
        model.revision += 1
    return lr


def instance_loss(raw_net: UNetRawNet, pair: TrainingPair, statics: Field, alpha: float,
                  sigma: float, eta: np.ndarray, edm_cfg: EdmConfig,
                  objective: str = "diffusion") -> torch.Tensor:
    """
    Loss of a single training instance.

    Args:
        raw_net: Network adapter
        pair: Standardized (conditioning, target) pair
        statics: Static fields on the network grid
        alpha: Smoothing strength for the conditioning
        sigma: Noise level (ignored by the regression objective)
        eta: Noise realization shaped like the target (ignored by regression)
        edm_cfg: EDM configuration
        objective: "diffusion" or "regression"

    Returns:
        Scalar loss tensor with autograd graph
    """
    dtype = next(raw_net.model.parameters()).dtype
    # torch.tensor copies; field data is read-only
    cond = torch.tensor(condition_input(pair.cond, statics, alpha), dtype=dtype)
    u = torch.tensor(pair.target.data, dtype=dtype)

    if objective == "regression":
        output = raw_net(torch.zeros_like(u), cond, 0.0)
        return ((output - u) ** 2).mean()

    eta_t = torch.tensor(eta, dtype=dtype)
    return denoising_loss(raw_net, cond, u, sigma, eta_t, edm_cfg)


def train(pairs: Sequence[TrainingPair], statics: Field, net_cfg: NetConfig,
          edm_cfg: EdmConfig, cfg: TrainConfig, seed: int) -> TrainResult:
    """
    Train a denoiser from scratch.

    Per step the draw order is fixed (pair, alpha, sigma, eta) so runs with
    augmentation on and off consume identical random streams. Overfit-one
    runs train on the first pair at a pinned sigma, without augmentation and
    on the overfit learning-rate schedule.

    Args:
        pairs: Standardized training pairs
        statics: Static fields on the network grid
        net_cfg: Network configuration
        edm_cfg: EDM configuration
        cfg: Training configuration
        seed: Seed for initialization and all per-step draws

    Returns:
        TrainResult with the model and loss trace

    Raises:
        TrainingAborted: On a non-finite loss or gradient
    """
    if not pairs:
        raise ArgumentError("No training pairs")

    torch.set_num_threads(cfg.threads)
    torch.use_deterministic_algorithms(True)

    rng = np.random.default_rng(seed)
    model = build_model(net_cfg, seed)
    model.train()
    raw_net = UNetRawNet(model)
    opt = OptimizerState.create(model, cfg)
    result = TrainResult(model=model)

    logger.info(
        f"Training {cfg.objective} model: {count_parameters(net_cfg)} parameters, "
        f"{len(pairs)} pairs, {cfg.steps} steps, augment={cfg.augmenting}, overfit_one={cfg.overfit_one}"
    )

    for step in range(cfg.steps):
        pair = pairs[0] if cfg.overfit_one else pairs[int(rng.integers(len(pairs)))]
        alpha = sample_alpha(rng)
        if not cfg.augmenting:
            alpha = 0.0

        if cfg.objective == "regression":
            sigma = REGRESSION_SIGMA
            eta = None
        else:
            sigma = cfg.pinned_sigma
            if sigma is None:
                sigma = sample_train_sigma(rng, edm_cfg)
            eta = rng.standard_normal(pair.target.data.shape) * sigma

        loss = instance_loss(raw_net, pair, statics, alpha, sigma, eta, edm_cfg, cfg.objective)
        loss_value = float(loss.detach())
        if not math.isfinite(loss_value):
            raise TrainingAborted(f"Non-finite loss ({loss_value})", step)

        opt.optimizer.zero_grad(set_to_none=False)
        loss.backward()
        lr = adamw_step(model, opt, cfg.steps)

        result.trace.append(LossRecord(step=step, sigma=sigma, alpha=alpha, loss=loss_value, lr=lr))

        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            logger.info(f"step {step}: loss={loss_value:.6g} sigma={sigma:.4g} alpha={alpha:.3f} lr={lr:.3g}")

    model.eval()
    return result


def write_loss_csv(path: Path, trace: Sequence[LossRecord]) -> None:
    """
    Write the loss trace as CSV ``step,sigma,alpha,loss,lr``.

    Floats are written with 17 significant digits so reruns compare byte-for-byte.
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(LOSS_CSV_HEADER)
        for r in trace:
            writer.writerow([r.step, f"{r.sigma:.17g}", f"{r.alpha:.17g}", f"{r.loss:.17g}", f"{r.lr:.17g}"])


def read_loss_csv(path: Path) -> list[LossRecord]:
    """Read a loss trace written by write_loss_csv."""
    with open(path, "r", newline="", encoding="utf-8") as f:
        return [
            LossRecord(
                step=int(row["step"]),
                sigma=float(row["sigma"]),
                alpha=float(row["alpha"]),
                loss=float(row["loss"]),
                lr=float(row["lr"]),
            )
            for row in csv.DictReader(f)
        ]
