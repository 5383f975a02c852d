import numpy as np
import pytest

from esodk import koopman
from esodk.nn import MinMaxScaler


def small_model(phi=5, hidden=(16, 16), seed=0, identity_init=False):
    """Untrained model with random A/B, for structural tests."""
    rng = np.random.default_rng(seed)
    sx = MinMaxScaler(np.array([5.0, -1.0, -0.5]), np.array([25.0, 1.0, 0.5]))
    su = MinMaxScaler(np.array([-3000.0, -0.3]), np.array([3000.0, 0.3]))
    dims = koopman.KoopmanDims(3, 2, phi)
    model = koopman.KoopmanModel.initial(dims, sx, su, rng, hidden, identity_init=identity_init)
    if not identity_init:
        model.A.W[...] = 0.9 * np.eye(dims.q) + 0.05 * rng.standard_normal((dims.q, dims.q))
        model.B.W[...] = 0.1 * rng.standard_normal((dims.q, 2))
        model.__dict__.pop("A_theta", None)
        model.__dict__.pop("B_theta", None)
    return model


@pytest.fixture
def model():
    return small_model()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def plant_dataset():
    """A small excitation dataset from the plant (a few seconds to build)."""
    from esodk.data import ExcitationSpec, collect_dataset
    from esodk.vehicle import VehicleParams

    return collect_dataset(VehicleParams(), ExcitationSpec(episodes=10, duration=10.0), seed=3)


@pytest.fixture(scope="session")
def quick_model(plant_dataset):
    """Briefly trained plant model: rough, but good enough for closed-loop A/B checks."""
    cfg = koopman.TrainingConfig(epochs=10, momentum=0.9, seed=0)
    return koopman.train(plant_dataset, cfg).model


_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, ok, detail)``; returns ``ok``."""

    def record(n, ok, detail):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
