import numpy as np
import pytest

from cftraj import tumorsim, training


@pytest.fixture(scope="session")
def sim_cohort():
    cfg = tumorsim.SimCohortConfig(n_patients=200, gamma=1.0, seed=5)
    cohort = tumorsim.simulate_cohort(cfg)
    return cohort


@pytest.fixture(scope="session")
def sim_dataset(sim_cohort):
    return tumorsim.cohort_to_dataset(sim_cohort)


@pytest.fixture(scope="session")
def splits(sim_dataset):
    return training.prepare_splits(sim_dataset, seed=5)


@pytest.fixture(scope="session")
def trained(splits, tmp_path_factory):
    """A small trained checkpoint (no balancing) shared across test modules."""
    train_ds, val_ds, test_ds = splits
    cfg = training.TrainConfig(epochs=15, seed=5, balancing_mode="none")
    path = tmp_path_factory.mktemp("model") / "model.ckpt"
    ck, report = training.train(train_ds, val_ds, cfg, str(path))
    return ck, report, str(path)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
