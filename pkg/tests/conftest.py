import pytest

from oran_twin.config_inference import build_training_set, holdout_split, scenario_grid, train_quietly


@pytest.fixture(scope="session")
def grid_split():
    """The 64-point scenario grid, split by scenario into 75% training and 25% held-out pairs."""
    pairs = build_training_set(scenario_grid())
    return holdout_split(pairs, 0.25, seed=0)


@pytest.fixture(scope="session")
def trained_model(grid_split):
    train_pairs, _ = grid_split
    return train_quietly(train_pairs)
