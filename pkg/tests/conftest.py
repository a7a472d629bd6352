import numpy as np
import pytest

from otafeel.core import LearningRateSchedule, PowerSchedule, SimConfig


@pytest.fixture
def ref_cfg():
    """Two devices, four antennas, 2-d updates, unit variances, alpha = 1."""
    return SimConfig(
        M=2, K=4, d=2, s=1, sigma_h2=1.0, sigma_z2=1.0, sigma_ht2=1.0, tau=1, T=1,
        alpha_schedule=PowerSchedule.constant(1.0),
        eta_schedule=LearningRateSchedule.constant(0.1),
        seed=0, batch_size=1,
    )


@pytest.fixture
def ref_updates():
    return np.array([[1.0, 0.0], [0.0, 1.0]])


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
