import numpy as np
import pytest

from powermap.grid import HeightGrid, Scenario


@pytest.fixture
def flat_grid():
    return HeightGrid(np.zeros((40, 40)))


@pytest.fixture
def one_building_grid():
    """40x40 flat grid with a single 13 m building block."""
    heights = np.zeros((40, 40))
    heights[18:22, 24:28] = 13.0
    return HeightGrid(heights)


@pytest.fixture
def scenario():
    return Scenario(bs_position=(20.5, 20.5, 14.0))
