import numpy as np
import pytest

from carl_fdia.env import EpisodeConfig, Scenario
from carl_fdia.grid import default_grid_path, default_initial_state, load_grid, rollout_reference
from carl_fdia.predictor import FeatureExtractor, PredictorConfig, reference_dataset, train_predictor


@pytest.fixture(scope="session")
def default_grid():
    return load_grid(default_grid_path())


@pytest.fixture(scope="session")
def predictor(default_grid):
    trajs = reference_dataset(default_grid, default_initial_state(10), 40, 500, 0.01, seed=1)
    return train_predictor(trajs, PredictorConfig(epochs=10))


@pytest.fixture(scope="session")
def scenario(default_grid, predictor):
    return Scenario(default_grid, EpisodeConfig(), FeatureExtractor(predictor), default_initial_state(10))


@pytest.fixture(scope="session")
def reference(default_grid):
    return rollout_reference(default_grid, default_initial_state(10), 500, 0.01)


def pytest_terminal_summary(terminalreporter):
    from .acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
