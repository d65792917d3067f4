import numpy as np
import pytest

from distrib_td.categorical_measures import CategoricalGrid
from distrib_td.mdp_model import FeatureMap, MrpModel, make_experiment_mdp


@pytest.fixture
def small_model():
    return make_experiment_mdp(0)


@pytest.fixture
def grid16():
    return CategoricalGrid(16, 0.75)


@pytest.fixture
def two_state_model():
    # hand-built chain with distinct rewards per transition
    outcomes = [
        [(0.3, 0.0, 0), (0.7, 1.0, 1)],
        [(0.6, 0.5, 0), (0.4, 0.25, 1)],
    ]
    Phi = np.array([[1.0, 0.2], [0.0, 0.9]])
    return MrpModel(0.6, outcomes), FeatureMap.normalized(Phi)


def rng(seed=0):
    return np.random.default_rng(seed)


def pytest_terminal_summary(terminalreporter):
    from .acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(RESULTS, key=lambda item: item[0]):
            terminalreporter.write_line(line)
