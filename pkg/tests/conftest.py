import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from tactforce.data import Episode, FRAME_DT
from tactforce.sim import generate_dataset

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("repo")
torch.set_num_threads(1)


def make_episode(n_frames=10, sensor="s0", seed=0, extras=None):
    rng = np.random.default_rng(seed)
    return Episode(
        images=rng.uniform(0, 1, (n_frames, 32, 32)).astype(np.float32),
        pmaps=rng.uniform(0, 5, (n_frames, 12, 12)).astype(np.float32),
        wrenches=rng.normal(size=(n_frames, 6)),
        timestamps=np.arange(n_frames) * FRAME_DT,
        sensor_id=sensor, indenter_id="sphere-hard-small", seed=seed, extras=extras or {})


@pytest.fixture
def episode_factory():
    return make_episode


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(12, ["plain", "m7x7", "m4x4"], duration=1.0, seed=3)
