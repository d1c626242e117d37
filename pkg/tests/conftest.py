import numpy as np
import pytest
from hypothesis import settings

from pgn import data, models, train

settings.register_profile("pgn", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("pgn")


@pytest.fixture(scope="session")
def tiny_data():
    return data.make_synthetic(n_train=96, n_test=64, seed=3)


@pytest.fixture(scope="session")
def tiny_classifier(tiny_data):
    return train.train_classifier(
        tiny_data.train_images, tiny_data.train_labels, models.default_classifier_spec(), epochs=2, seed=0
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_data():
    return data.make_synthetic(n_train=1600, n_test=300, seed=11)


@pytest.fixture(scope="session")
def small_classifier(small_data):
    return train.train_classifier(
        small_data.train_images, small_data.train_labels, models.default_classifier_spec(), epochs=10, seed=0
    )


# acceptance criteria report their verdicts here; printed once at the end of the session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
