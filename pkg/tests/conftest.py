import numpy as np
import pytest

from piaug.worldsim import CollectPolicy, SimParams, Terrain, collect_dataset, generate_terrain


@pytest.fixture(scope="session")
def small_terrain():
    return generate_terrain(seed=11, size=128, roughness=1.0)


@pytest.fixture(scope="session")
def flat_terrain():
    return generate_terrain(seed=3, size=64, roughness=0.0)


@pytest.fixture(scope="session")
def tiny_dataset(small_terrain):
    """A handful of short low-speed sequences for model/trainer tests."""
    rng = np.random.default_rng(42)
    policy = CollectPolicy(n_sequences=12, T=10, speed_cap=3.0,
                           episode_steps=60, stride=15, margin=20.0)
    return collect_dataset(small_terrain, policy, rng, SimParams())


def make_ramp_terrain(ax=0.05, ay=0.02, size=64, resolution=0.5):
    """Analytic planar terrain h = ax*x + ay*y with mid-range friction."""
    xs = np.arange(size) * resolution
    h = ax * xs[:, None] + ay * xs[None, :]
    mu = np.full((size, size), 0.7)
    return Terrain(height=h, friction=mu, resolution=resolution, seed=0)
