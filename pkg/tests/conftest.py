import numpy as np
import pytest

from evtrack.core import SeededRng
from evtrack.world import OccupancyGrid, Scene, generate_scene


@pytest.fixture
def rng():
    return SeededRng(12345)


def empty_grid(w=60, h=60, res=0.1):
    return OccupancyGrid(res, np.zeros((h, w), dtype=bool))


@pytest.fixture
def empty_scene():
    return Scene(id="empty", grid=empty_grid(120, 120))


@pytest.fixture(scope="session")
def small_scene():
    return generate_scene("small", SeededRng(7), size_range=(10.0, 12.0),
                          wall_range=(0, 1))
