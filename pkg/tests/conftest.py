from __future__ import annotations

import pytest

from semilob.kernel import Deterministic, Exponential, Gamma, KernelSide, Weibull


@pytest.fixture
def cl_balanced():
    return KernelSide.memoryless(1.0, 1.0)


@pytest.fixture
def cl_strict():
    return KernelSide.memoryless(1.0, 1.5)


@pytest.fixture
def mixed_strict():
    """Strict kernel mixing Gamma and Exponential durations."""
    return KernelSide.from_matrix(0.35, 0.6, {(1, 1): Gamma(0.5, 2.0), (1, -1): Exponential(1.0),
                                              (-1, 1): Gamma(2.0, 0.5), (-1, -1): Exponential(0.8)},
                                  v0=0.6)


@pytest.fixture
def weibull_kernel():
    return KernelSide.from_matrix(0.4, 0.6, {(1, 1): Weibull(0.6, 1.0), (1, -1): Weibull(0.5, 2.0),
                                             (-1, 1): Weibull(0.8, 1.0), (-1, -1): Weibull(0.7, 0.5)},
                                  v0=0.4)


@pytest.fixture
def lattice_kernel():
    return KernelSide.from_matrix(0.2, 0.9, {(1, 1): Deterministic(0.5), (1, -1): Deterministic(1.0),
                                             (-1, 1): Deterministic(1.5), (-1, -1): Deterministic(2.0)},
                                  v0=0.35)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
