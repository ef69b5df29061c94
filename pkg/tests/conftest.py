import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from facefit.facemodel import generate_toy_model
from facefit.synthetic import SyntheticConfig, random_scene, render_scene

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")

W = H = 128


@pytest.fixture(scope="session")
def toy():
    return generate_toy_model(0, 32)


@pytest.fixture(scope="session")
def small_toy():
    return generate_toy_model(3, 12, K_id=4, K_exp=3, K_tex=4)


@pytest.fixture(scope="session")
def scene(toy):
    return random_scene(toy, 0, SyntheticConfig(W, H))


@pytest.fixture(scope="session")
def target(toy, scene):
    image, landmarks, render = render_scene(toy, scene, W, H)
    return image, landmarks, render


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance lines are collected here and repeated at the end of the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
