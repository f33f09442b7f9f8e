import numpy as np
import pytest

from toponav import simworld as sw


def make_box_world(width=80, height=80, cell_size=0.1, color=3, color_count=16):
    """Empty room: free interior, obstacle ring, uniform wall color."""
    occ = np.zeros((height, width), dtype=bool)
    occ[0, :] = occ[-1, :] = True
    occ[:, 0] = occ[:, -1] = True
    col = np.where(occ, color, -1).astype(np.int16)
    return sw.OccupancyWorld(occ, col, cell_size, color_count, seed=0)


def make_world_from_ascii(rows, cell_size=0.1, color=1, color_count=16):
    """'#' obstacle, '.' free; handy for hand-built geometry."""
    occ = np.array([[ch == "#" for ch in row] for row in rows], dtype=bool)
    col = np.where(occ, color, -1).astype(np.int16)
    return sw.OccupancyWorld(occ, col, cell_size, color_count, seed=0)


@pytest.fixture(scope="session")
def box_world():
    return make_box_world()


@pytest.fixture(scope="session")
def seeded_world():
    return sw.generate_world(7, sw.WorldSpec(60, 60, rooms=4))


@pytest.fixture(scope="session")
def big_world():
    return sw.generate_world(7, sw.WorldSpec(200, 200, rooms=12))
