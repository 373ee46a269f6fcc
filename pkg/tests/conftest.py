import numpy as np
import pytest

from polarfuse.geometry import Box3D
from polarfuse.simulator import SimConfig, generate_scene


@pytest.fixture(scope="session")
def small_sim():
    return SimConfig(n_train=20, n_val=6, seed=3)


@pytest.fixture(scope="session")
def small_scenes(small_sim):
    return [generate_scene(small_sim, i)[0] for i in small_sim.train_indices()]


def random_box(rng, label="Car", spread=30.0):
    while True:
        c = (rng.uniform(-spread, spread), rng.uniform(-spread, spread), rng.uniform(-1.5, 0.5))
        if np.hypot(c[0], c[1]) > 1.0:
            break
    dims = (rng.uniform(0.5, 5.0), rng.uniform(0.5, 2.5), rng.uniform(1.0, 2.0))
    return Box3D(c, dims, rng.uniform(0, 2 * np.pi), label)
