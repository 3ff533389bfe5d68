import numpy as np
import pytest

from tier.encoders import ModelDims, init_params
from tier.synth_data import generate_dataset

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def dims():
    return ModelDims()


@pytest.fixture(scope="session")
def params(dims):
    return init_params(0, dims)


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(0, {"train": 64, "val": 48, "test": 48})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")


ACCEPTANCE_EPOCHS = 10


@pytest.fixture(scope="session")
def default_dataset():
    return generate_dataset(0)


@pytest.fixture(scope="session")
def trained_pair(default_dataset):
    """Regularized (0.2, 0.1) and unregularized runs from one shared init and seed."""
    from tier.trainer import TrainConfig, train

    init = init_params(0, default_dataset.manifest.dims)
    runs = {}
    for name, (lp, lt) in {"regularized": (0.2, 0.1), "unregularized": (0.0, 0.0)}.items():
        cfg = TrainConfig(lambda_p=lp, lambda_t=lt, epochs=ACCEPTANCE_EPOCHS, seed=0)
        runs[name] = train(cfg, default_dataset, init=init)
    return runs
