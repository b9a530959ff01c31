import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from advwt.classifier import ModelSpec, TrainConfig, train
from advwt.signs import default_catalog, generate_dataset

settings.register_profile("advwt", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("advwt")


@pytest.fixture(scope="session")
def small_data():
    """Ten classes, 10 renders each at 64x64 (80 train / 20 test)."""
    return generate_dataset(default_catalog(), 10, seed=11, resolution=64)


@pytest.fixture(scope="session")
def small_model(small_data):
    tr, te = small_data
    return train(tr, ModelSpec(arch="mlp", hidden=(32,)), TrainConfig(epochs=15, seed=3), eval_set=te)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, h=16, w=16, c=3):
    return rng.random((h, w, c)).astype(np.float32)


_ACCEPTANCE = {}


@pytest.fixture(scope="session")
def acceptance_log():
    """Criterion number -> (passed, detail); printed in the terminal summary."""
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
