import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from datagen import generate_square_dataset  # noqa: E402

from relprop import harness, model_io  # noqa: E402

FIXTURES = Path(__file__).resolve().parent / "fixtures"


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def models_dir() -> Path:
    return FIXTURES / "models"


def _load(name):
    return model_io.load_model(FIXTURES / "models" / f"{name}.json",
                               FIXTURES / "models" / f"{name}.bin")


@pytest.fixture(scope="session")
def detector_net():
    return _load("square_detector")


@pytest.fixture(scope="session")
def degenerate_net():
    return _load("degenerate")


@pytest.fixture(scope="session")
def conv_pool_net():
    return _load("conv_pool")


@pytest.fixture(scope="session")
def dense2_net():
    return _load("dense2")


@pytest.fixture(scope="session")
def residual_net():
    return _load("residual_small")


@pytest.fixture(scope="session")
def square_dataset(tmp_path_factory):
    """The full 1000-image synthetic dataset used by the acceptance suite."""
    out = tmp_path_factory.mktemp("square_data")
    manifest = generate_square_dataset(out, count=1000, seed=0)
    return harness.load_dataset(manifest)


@pytest.fixture(scope="session")
def small_dataset_path(tmp_path_factory):
    out = tmp_path_factory.mktemp("square_small")
    return generate_square_dataset(out, count=24, seed=1, percentages=(5, 20, 50))


@pytest.fixture(scope="session")
def small_dataset(small_dataset_path):
    return harness.load_dataset(small_dataset_path)
