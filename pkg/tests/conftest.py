import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from cwlab.bench import BenchSpec, build_benchmark
from cwlab.datasets import generate_dataset
from cwlab.envs import EnvConfig

settings.register_profile("cwlab", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("cwlab")
torch.set_num_threads(1)


@pytest.fixture(scope="session")
def physics_state_cfg():
    return EnvConfig(obs_mode="state", frame_skip=10, episode_length=20)


@pytest.fixture(scope="session")
def physics_ds(physics_state_cfg):
    return generate_dataset(physics_state_cfg, 24, 42)


@pytest.fixture(scope="session")
def pushing_ds():
    return generate_dataset(EnvConfig(name="pushing-grid", obs_mode="state", episode_length=20), 24, 3)


@pytest.fixture(scope="session")
def physics_bench(physics_ds):
    return build_benchmark(physics_ds, BenchSpec(max_samples=60, horizons=(1, 5)))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
