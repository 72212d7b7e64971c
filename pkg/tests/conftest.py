import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dean.objectives import ProblemInstance, QuadraticObjective
from dean.topology import Graph

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def k2_instance():
    """Two unit 1-D quadratics with minimisers 0 and 2 on a single link."""
    g = Graph.path(2)
    return ProblemInstance(g, [QuadraticObjective([[1.0]], [0.0]), QuadraticObjective([[1.0]], [2.0])])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
