import pytest

from unirep.encoder import EncoderConfig
from unirep.synthdata import DatasetConfig, make_dataset
from unirep.trainer import TrainConfig, train

TINY_DATA = DatasetConfig(train_identities=5, test_identities=4, obs_dim=16, train_samples_per_identity=8,
                          test_samples_per_identity=8, gallery_per_identity=2, identity_rank=8, pose_planes=2)
TINY_MODEL = EncoderConfig(input_dim=16, hidden=(12,), embedding_dim=16, group_count=4)


@pytest.fixture(scope="session")
def desk_dataset():
    return make_dataset(DatasetConfig(seed=0))


@pytest.fixture(scope="session")
def desk_bundle(desk_dataset):
    return train(desk_dataset, EncoderConfig(), TrainConfig(seed=0))


@pytest.fixture(scope="session")
def tiny_dataset():
    return make_dataset(TINY_DATA)


@pytest.fixture(scope="session")
def tiny_bundle(tiny_dataset):
    return train(tiny_dataset, TINY_MODEL, TrainConfig(epochs=3, batch_size=8))


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
