"""Tests for the analytic self-check suite."""

import pytest

from src.errors import ArgumentError
from src.oracle_checks import CHECKS, CheckOptions, CheckResult, euler_gain, format_table, run_checks

FAST = ["coefficient-identities", "schedule-endpoints", "crps-quadrature",
        "tweedie-consistency", "euler-convergence", "spectral-filter"]


def test_registry_order():
    assert list(CHECKS) == [
        "coefficient-identities",
        "schedule-endpoints",
        "crps-quadrature",
        "gradient-check",
        "tweedie-consistency",
        "gaussian-transport",
        "euler-convergence",
        "spectral-filter",
    ]


@pytest.mark.parametrize("name", FAST)
def test_fast_checks_pass(name):
    (result,) = run_checks([name])
    assert result.passed, result.detail
    assert result.seconds >= 0.0


def test_gradient_check_passes():
    (result,) = run_checks(["gradient-check"])
    assert result.passed, result.detail


@pytest.mark.slow
def test_gaussian_transport_passes():
    (result,) = run_checks(["gaussian-transport"])
    assert result.passed, result.detail


def test_perturbed_coefficients_fail():
    (result,) = run_checks(["coefficient-identities"], CheckOptions(perturb_coeff=1e-6))
    assert not result.passed


def test_unknown_check():
    with pytest.raises(ArgumentError):
        run_checks(["coefficient-identities", "bogus"])


def test_euler_gain_single_step():
    # one step from 2 to 1 with s = 1 scales (x - m) by 1 - 2/5
    assert euler_gain([2.0, 1.0], 1.0) == pytest.approx(0.6)


def test_format_table():
    table = format_table([CheckResult("a", True, "ok", 0.5), CheckResult("longer-name", False, "bad", 1.25)])
    lines = table.splitlines()
    assert lines[0].startswith("check")
    assert "PASS" in lines[1] and "FAIL" in lines[2]
    assert lines[2].endswith("bad")
