import numpy as np
import pytest
import torch
from hypothesis import settings

from raycal.synth import make_scene

settings.register_profile("repo", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("repo")

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_scene():
    return make_scene(seed=3, n_cameras=4, resolution=(16, 16), grid=16, samples=48, corrs_per_pair=8)


@pytest.fixture(scope="session")
def ring_scene():
    return make_scene(seed=0, n_cameras=6, resolution=(16, 16), grid=12, samples=32, corrs_per_pair=10)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
