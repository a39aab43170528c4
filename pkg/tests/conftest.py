import sys

import numpy as np
import pytest

from ergodic_mfc import model, net


@pytest.fixture(scope="session")
def t4_fitted():
    """A small trig-embedded net least-squares fitted to the optimal field of T4 (d=1)."""
    spec, exact = model.testcase(4, 1)
    arch = net.NetworkArch((1, 6, 1))
    theta0 = net.init_params(arch, 0)
    theta0[-7:] = np.random.default_rng(1).normal(scale=0.1, size=7)
    theta = net.fit_to_field(arch, theta0, exact.h, n_points=256, grad_weight=0.01,
                             maxiter=3000)
    return spec, exact, arch, theta


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
