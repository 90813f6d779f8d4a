"""Self-checks of DeskDownscale against analytic oracles.

Each check is a function ``check(options) -> CheckResult`` registered in
CHECKS in the order the ``oracle-check`` command runs them.
"""

import math
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .edm import EdmConfig, loss_weight, precond_coeffs, score_from_denoiser
from .errors import ArgumentError
from .grid import Field, Grid, upsample_bilinear
from .network import NetConfig, backward, build_model, forward
from .sampler import GaussianTaskSpec, OracleDenoiser, edm_schedule, integrate_pf_ode, oracle_denoiser
from .spectral import dft2, idft2, smooth
from .synth import smooth_random_field, state_channels
from .utils import get_logger
from .verify import crps_ensemble, crps_quadrature

logger = get_logger(__name__)

IDENTITY_TOL = 1e-12
CRPS_TOL = 1e-6
GRAD_REL_TOL = 1e-4
# central differences cannot resolve gradients much below h^2
GRAD_ABS_TOL = 1e-7
GRAD_STEP = 1e-3
TWEEDIE_TOL = 1e-10
PASS_FRACTION = 0.95
VARIANCE_TOL = 0.05
CONVERGENCE_RATIO = (1.7, 2.3)
ROUNDTRIP_TOL = 1e-9


@dataclass(frozen=True)
class CheckOptions:
    seed: int = 0
    perturb_coeff: float = 0.0


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def check_coefficient_identities(opts: CheckOptions) -> CheckResult:
    """c_skip = sd^2 c_in^2, c_out = sigma sd c_in, w c_out^2 = 1 over 50 log-spaced sigma."""
    cfg = EdmConfig()
    worst = 0.0
    for sigma in np.logspace(-3.0, math.log10(80.0), 50):
        c = precond_coeffs(float(sigma), cfg)
        c_skip = c.c_skip * (1.0 + opts.perturb_coeff)
        errors = (
            abs(c_skip - cfg.sigma_data ** 2 * c.c_in ** 2),
            abs(c.c_out - sigma * cfg.sigma_data * c.c_in),
            abs(loss_weight(float(sigma), cfg) * c.c_out ** 2 - 1.0),
        )
        worst = max(worst, *errors)
    return CheckResult("coefficient-identities", worst <= IDENTITY_TOL, f"max error {worst:.3e}")


def check_schedule_endpoints(opts: CheckOptions) -> CheckResult:
    sched = edm_schedule()
    levels = np.array(sched.levels)
    ok = (
        levels[0] == 80.0 and levels[-1] == 0.002
        and len(levels) == 128 and bool(np.all(np.diff(levels) < 0))
    )
    return CheckResult("schedule-endpoints", ok, f"sigma_1={levels[0]!r} sigma_N={levels[-1]!r} N={len(levels)}")


def check_crps_quadrature(opts: CheckOptions) -> CheckResult:
    rng = np.random.default_rng(opts.seed)
    worst = 0.0
    single_exact = True
    for _ in range(500):
        n = int(rng.integers(1, 9))
        members = rng.normal(0.0, 2.0, n)
        y = float(rng.normal())
        closed = crps_ensemble(members, y)
        worst = max(worst, abs(closed - crps_quadrature(members, y)))
        if n == 1:
            single_exact &= closed == abs(members[0] - y)
    return CheckResult("crps-quadrature", worst <= CRPS_TOL and single_exact,
                       f"max |closed - quadrature| {worst:.3e}, n=1 exact: {single_exact}")


def gradient_check_config() -> NetConfig:
    """One-stage network with C0 = 4 used by the gradient check."""
    return NetConfig(base_channels=4, multipliers=(2,))


def check_gradients(opts: CheckOptions, n_params: int = 200, grid: int = 8) -> CheckResult:
    """Reverse-mode gradients vs central differences in float64."""
    rng = np.random.default_rng(opts.seed)
    cfg = gradient_check_config()
    model = build_model(cfg, opts.seed, dtype=torch.float64)

    # a zero output layer would leave every upstream gradient at exactly 0
    with torch.no_grad():
        w = model.out_conv.weight
        w.copy_(torch.from_numpy(rng.normal(0.0, 0.1, tuple(w.shape))))
        model.out_conv.bias.copy_(torch.from_numpy(rng.normal(0.0, 0.1, tuple(model.out_conv.bias.shape))))

    x = rng.standard_normal((grid, grid, cfg.in_channels))
    sigma = 0.7
    upstream = rng.standard_normal((grid, grid, cfg.out_channels))
    up_t = torch.from_numpy(upstream)

    _, record = forward(model, x, sigma, record=True)
    grads = backward(model, record, upstream)

    def objective() -> float:
        out, _ = forward(model, x, sigma)
        return float((out * up_t).sum())

    named = list(model.named_parameters())
    sizes = np.array([p.numel() for _, p in named])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    picks = rng.choice(int(offsets[-1]), size=min(n_params, int(offsets[-1])), replace=False)

    failures = 0
    worst = 0.0
    with torch.no_grad():
        for flat in picks:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            name, p = named[k]
            i = int(flat - offsets[k])
            view = p.view(-1)
            original = float(view[i])
            view[i] = original + GRAD_STEP
            plus = objective()
            view[i] = original - GRAD_STEP
            minus = objective()
            view[i] = original

            numeric = (plus - minus) / (2.0 * GRAD_STEP)
            analytic = float(grads[name].view(-1)[i])
            err = abs(analytic - numeric)
            scale = max(abs(analytic), abs(numeric))
            if scale > 0:
                worst = max(worst, err / scale)
            if err > GRAD_REL_TOL * scale and err > GRAD_ABS_TOL:
                failures += 1

    return CheckResult("gradient-check", failures == 0,
                       f"{len(picks)} parameters, {failures} failures, worst relative error {worst:.2e}")


def check_tweedie(opts: CheckOptions) -> CheckResult:
    """Score of the Gaussian posterior-mean denoiser vs the analytic Gaussian score."""
    rng = np.random.default_rng(opts.seed)
    grid = Grid(0.0, 0.0, 1.0, 1.0, 2, 2)
    worst = 0.0
    for _ in range(100):
        a, b = rng.normal(), rng.normal()
        s = float(rng.uniform(0.2, 3.0))
        sigma = float(10 ** rng.uniform(-2.0, 1.0))
        task = GaussianTaskSpec(grid, 1, a, b, s)
        u_bar = rng.normal(size=(1, 1, 1))
        x = rng.normal(size=(1, 1, 1)) * 3.0
        m = a * u_bar + b
        score = score_from_denoiser(oracle_denoiser(task, x, u_bar, sigma), x, sigma)
        analytic = -(x - m) / (s * s + sigma * sigma)
        worst = max(worst, float(np.max(np.abs(score - analytic) / np.maximum(1.0, np.abs(analytic)))))
    return CheckResult("tweedie-consistency", worst <= TWEEDIE_TOL, f"max error {worst:.3e}")


def euler_gain(levels: Sequence[float], s: float) -> float:
    """Factor by which Euler steps scale (x - m) for the linear Gaussian denoiser."""
    gain = 1.0
    for cur, nxt in zip(levels[:-1], levels[1:]):
        gain *= 1.0 + (nxt - cur) * cur / (s * s + cur * cur)
    return gain


def check_gaussian_transport(opts: CheckOptions, size: int = 16, factor: int = 4, n_samples: int = 4096,
                             steps: int = 64) -> CheckResult:
    """
    PF-ODE with the oracle denoiser transports N(0, sigma_max^2) to the task's conditional.

    Each pixel's sample mean and variance are compared against the Gaussian
    that the Euler scheme propagates exactly; the continuous-time variance
    gap at this step count is reported alongside.
    """
    rng = np.random.default_rng(opts.seed)
    fine = Grid(0.0, 0.0, -1.0, 1.0, size, size)
    task = GaussianTaskSpec(fine, factor, 1.0, 0.0, 1.0)
    coarse_grid = task.coarse_grid
    channels = state_channels()
    u_bar = Field(coarse_grid, channels,
                  np.stack([smooth_random_field(rng, coarse_grid.H, coarse_grid.W, 1) for _ in channels], axis=-1))
    cond = upsample_bilinear(u_bar, fine).data

    sched = edm_schedule(steps)
    s = 1.0
    x0 = rng.standard_normal((n_samples, size, size, len(channels))) * sched.sigma_max
    samples = integrate_pf_ode(OracleDenoiser(task), cond, sched, x0)

    m = task.mean(cond)
    gain = euler_gain(sched.levels, s)
    target_mean = m * (1.0 - gain)
    target_var = gain ** 2 * sched.sigma_max ** 2
    continuous_var = s * s + sched.sigma_min ** 2

    emp_mean = samples.mean(axis=0)
    emp_var = samples.var(axis=0, ddof=1)
    se = np.sqrt(target_var / n_samples)
    mean_ok = np.abs(emp_mean - target_mean) <= 3.0 * se
    var_ok = np.abs(emp_var / target_var - 1.0) <= VARIANCE_TOL
    mean_frac, var_frac = float(mean_ok.mean()), float(var_ok.mean())

    return CheckResult(
        "gaussian-transport",
        mean_frac >= PASS_FRACTION and var_frac >= PASS_FRACTION,
        f"mean pass {mean_frac:.3f}, variance pass {var_frac:.3f}, "
        f"N={steps} discretization variance ratio {target_var / continuous_var:.4f}",
    )


def check_euler_convergence(opts: CheckOptions, s: float = 1.0, x0: float = 3.0) -> CheckResult:
    """Euler error vs the closed-form linear ODE solution halves when N doubles."""
    errors = []
    for n in (16, 32, 64, 128):
        sched = edm_schedule(n)
        denoiser = lambda x, c, sigma: s * s * x / (s * s + sigma * sigma)  # noqa: E731
        final = float(integrate_pf_ode(denoiser, np.zeros(1), sched, np.array([x0]))[0])
        exact = x0 * math.sqrt((sched.sigma_min ** 2 + s * s) / (sched.sigma_max ** 2 + s * s))
        errors.append(abs(final - exact))
    ratios = [errors[i] / errors[i + 1] for i in range(len(errors) - 1)]
    lo, hi = CONVERGENCE_RATIO
    return CheckResult("euler-convergence", all(lo <= r <= hi for r in ratios),
                       "error ratios " + ", ".join(f"{r:.3f}" for r in ratios))


def check_spectral(opts: CheckOptions, size: int = 32) -> CheckResult:
    rng = np.random.default_rng(opts.seed)
    grid = Grid(0.0, 0.0, 1.0, 1.0, size, size)
    field = Field(grid, state_channels()[:1], rng.standard_normal((size, size, 1)))

    bypass = smooth(field, 0.0).data.tobytes() == field.data.tobytes()

    values = field.data[:, :, 0]
    roundtrip = float(np.max(np.abs(idft2(dft2(values)) - values)))

    energies = [dft2(smooth(field, a).data[:, :, 0]).energy_above(size / 4) for a in (0.0, 0.2, 0.4, 0.6, 0.8)]
    monotone = all(e1 <= e0 * (1.0 + 1e-12) for e0, e1 in zip(energies[:-1], energies[1:]))

    return CheckResult("spectral-filter", bypass and monotone and roundtrip <= ROUNDTRIP_TOL,
                       f"bypass {bypass}, monotone {monotone}, round trip {roundtrip:.2e}")


CHECKS: dict[str, Callable[[CheckOptions], CheckResult]] = {
    "coefficient-identities": check_coefficient_identities,
    "schedule-endpoints": check_schedule_endpoints,
    "crps-quadrature": check_crps_quadrature,
    "gradient-check": check_gradients,
    "tweedie-consistency": check_tweedie,
    "gaussian-transport": check_gaussian_transport,
    "euler-convergence": check_euler_convergence,
    "spectral-filter": check_spectral,
}


def run_checks(names: Optional[Sequence[str]] = None, opts: CheckOptions = CheckOptions()) -> list[CheckResult]:
    """
    Run the selected checks (all by default) in registry order.

    Args:
        names: Check names to run
        opts: Seed and fault-injection options

    Returns:
        One result per check
    """
    selected = list(CHECKS) if not names else list(names)
    unknown = [n for n in selected if n not in CHECKS]
    if unknown:
        raise ArgumentError(f"Unknown check(s) {unknown}; available: {list(CHECKS)}")

    results = []
    for name in selected:
        start = time.perf_counter()
        result = CHECKS[name](opts)
        elapsed = time.perf_counter() - start
        result = CheckResult(result.name, result.passed, result.detail, elapsed)
        logger.info(f"{name}: {'PASS' if result.passed else 'FAIL'} ({result.detail}) in {elapsed:.2f}s")
        results.append(result)
    return results


def format_table(results: Sequence[CheckResult]) -> str:
    """Fixed-width pass/fail table."""
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  result  seconds  detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.seconds:7.2f}  {r.detail}")
    return "\n".join(lines)
