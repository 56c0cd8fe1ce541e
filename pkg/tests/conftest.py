import numpy as np
import pytest

from mtlat.data import synth_dataset
from mtlat.models import init_params
from mtlat.training import TrainRecipe, train


@pytest.fixture(scope="session")
def tiny_data():
    return synth_dataset(7, n_classes=4, n_per_class=60, n_test_per_class=15, size=16)


@pytest.fixture(scope="session")
def tiny_model(tiny_data):
    return train(tiny_data, TrainRecipe(mode="standard", epochs=6, batch_size=32, seed=1)).model


@pytest.fixture(scope="session")
def tiny_mlp(tiny_data):
    return train(tiny_data, TrainRecipe(mode="standard", epochs=6, batch_size=32, seed=2,
                                        arch="small-mlp")).model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def random_conv():
    return init_params("small-conv", (8, 8, 3), 5, seed=11)


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def record_criterion(number, title, passed, detail=""):
    ACCEPTANCE_LINES[number] = f"criterion {number} {'PASS' if passed else 'FAIL'}: {title}" + (
        f" ({detail})" if detail else "")
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
