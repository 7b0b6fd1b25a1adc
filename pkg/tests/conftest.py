import sys

import numpy as np
import pytest

from manifold_guidance.geometry import make_manifold
from manifold_guidance.prior import random_prior


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_manifold():
    return make_manifold(16, 3, seed=5)


@pytest.fixture
def mixture(small_manifold):
    return random_prior(small_manifold, 3, seed=11)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
