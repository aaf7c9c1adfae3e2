import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pcmesh.body import make_toy_model
from pcmesh.synth import GenerateConfig, generate_dataset

settings.register_profile(
    "default", deadline=None, max_examples=30, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def toy_body():
    return make_toy_model(16, 400)


@pytest.fixture(scope="session")
def small_body():
    return make_toy_model(6, 120)


@pytest.fixture(scope="session")
def toy_samples(toy_body):
    return generate_dataset(toy_body, GenerateConfig(num_samples=3, points=256, noise_sigma=0.005, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
