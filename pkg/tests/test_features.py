import numpy as np
import pytest

from powermap.features import (
    bs_distance_map,
    building_height_map,
    make_features,
    ms_distance_map,
    normalize_power,
    srp_map,
)
from powermap.grid import GridIndex, HeightGrid, RadioMap, Scenario
from powermap.raysim import simulate_map


@pytest.fixture
def world():
    heights = np.zeros((30, 30))
    heights[10:14, 18:22] = 13.0
    grid = HeightGrid(heights)
    scenario = Scenario(bs_position=(15.0, 15.0, 14.0))
    return grid, scenario, simulate_map(grid, scenario)


class TestBsDistanceMap:
    def test_hand_evaluated_corner(self):
        grid = HeightGrid(np.zeros((9, 9)))
        sc = Scenario(bs_position=(0.0, 0.0, 14.0))
        m = bs_distance_map(grid, sc, GridIndex(4, 4), 9)
        # window cell (0,0) center is (0.5, 0.5, 1): sqrt(0.5^2+0.5^2+13^2)/500
        assert m[0, 0] == pytest.approx(0.026038, abs=1e-5)

    def test_bs_directly_above(self):
        grid = HeightGrid(np.zeros((9, 9)))
        sc = Scenario(bs_position=(4.5, 4.5, 14.0))
        m = bs_distance_map(grid, sc, GridIndex(4, 4), 9)
        assert m[4, 4] == pytest.approx(13.0 / 500.0, abs=1e-12)

    def test_clamped_at_one(self):
        grid = HeightGrid(np.zeros((9, 9)))
        sc = Scenario(bs_position=(700.0, 0.5, 14.0))
        m = bs_distance_map(grid, sc, GridIndex(4, 4), 9)
        assert np.all(m == 1.0)

    def test_even_window_rejected(self):
        grid = HeightGrid(np.zeros((9, 9)))
        sc = Scenario(bs_position=(0.0, 0.0, 14.0))
        with pytest.raises(ValueError):
            bs_distance_map(grid, sc, GridIndex(4, 4), 8)

    def test_symmetry_when_bs_above_center(self):
        grid = HeightGrid(np.zeros((31, 31)))
        sc = Scenario(bs_position=(15.5, 15.5, 14.0))
        m = bs_distance_map(grid, sc, GridIndex(15, 15), 11)
        assert np.allclose(m, m[::-1, :])
        assert np.allclose(m, m[:, ::-1])
        assert np.allclose(m, m.T)


class TestMsDistanceMap:
    def test_center_zero_corner_one(self):
        m = ms_distance_map(65)
        assert m[32, 32] == 0.0
        assert m[0, 0] == 1.0
        assert m[64, 64] == 1.0

    def test_adjacent_pixel_value(self):
        m = ms_distance_map(65)
        assert m[32, 33] == pytest.approx(0.0221, abs=1e-4)

    def test_sample_invariant(self):
        assert np.array_equal(ms_distance_map(17), ms_distance_map(17))

    def test_symmetry(self):
        m = ms_distance_map(15)
        assert np.allclose(m, m[::-1, :])
        assert np.allclose(m, m.T)


class TestBuildingHeightMap:
    def test_values_and_padding(self, world):
        grid, _, _ = world
        m = building_height_map(grid, GridIndex(20, 12), 9)
        assert m[0, 0] >= 0.0
        # center cell sits inside the 13 m block
        assert m[4, 4] == pytest.approx(0.5)  # 13 / 26

    def test_ground_is_zero(self, world):
        grid, _, _ = world
        m = building_height_map(grid, GridIndex(3, 3), 9)
        assert np.all(m == 0.0)

    def test_off_grid_padding(self, world):
        grid, _, _ = world
        m = building_height_map(grid, GridIndex(0, 0), 9)
        assert np.all(m[:4, :] == 0.0) and np.all(m[:, :4] == 0.0)


class TestSrpMap:
    def test_constant_neighbourhood(self):
        grid = HeightGrid(np.zeros((9, 9)))
        power = np.full((9, 9), -75.0)
        m = RadioMap(grid, power, np.ones((9, 9), dtype=bool))
        s = srp_map(m, GridIndex(4, 4), 3)
        assert np.all(s == 0.5)  # (-75 + 110) / 70

    def test_paper_range_value(self):
        assert normalize_power(-89.0) == pytest.approx(0.3)

    def test_unavailable_neighbour_takes_center(self, world):
        grid, _, sim = world
        # cell just west of the building block
        center = GridIndex(17, 12)
        assert sim.available_at(center)
        s = srp_map(sim, center, 3)
        center_value = normalize_power(sim.power_at(center))
        assert s[1, 2] == pytest.approx(center_value)  # east neighbour is inside

    def test_unavailable_center_rejected(self, world):
        _, _, sim = world
        with pytest.raises(ValueError):
            srp_map(sim, GridIndex(20, 12), 3)

    def test_off_grid_takes_center(self):
        grid = HeightGrid(np.zeros((5, 5)))
        rng = np.random.default_rng(0)
        power = rng.uniform(-90, -60, (5, 5))
        m = RadioMap(grid, power, np.ones((5, 5), dtype=bool))
        s = srp_map(m, GridIndex(0, 0), 3)
        assert s[0, 0] == pytest.approx(normalize_power(power[0, 0]))


class TestMakeFeatures:
    def test_deterministic(self, world):
        grid, sc, sim = world
        a = make_features(grid, sc, sim, GridIndex(5, 5), 9, 3)
        b = make_features(grid, sc, sim, GridIndex(5, 5), 9, 3)
        assert np.array_equal(a.bs_distance, b.bs_distance)
        assert np.array_equal(a.srp, b.srp)

    def test_ms_plane_shared_across_centers(self, world):
        grid, sc, sim = world
        a = make_features(grid, sc, sim, GridIndex(5, 5), 9, 3)
        b = make_features(grid, sc, sim, GridIndex(22, 25), 9, 3)
        assert np.array_equal(a.ms_distance, b.ms_distance)

    def test_flat_area_building_plane_zero(self, world):
        grid, sc, sim = world
        f = make_features(grid, sc, sim, GridIndex(4, 25), 9, 3)
        assert np.all(f.building == 0.0)

    def test_all_outputs_in_unit_range(self, world):
        grid, sc, sim = world
        rng = np.random.default_rng(1)
        cells = sim.available_indices()
        for _ in range(25):
            ix = cells[rng.integers(len(cells))]
            f = make_features(grid, sc, sim, ix, 9, 3)
            for plane in (f.bs_distance, f.ms_distance, f.building, f.srp):
                assert np.all(np.isfinite(plane))
                assert np.all((plane >= 0.0) & (plane <= 1.0))

    def test_input_stacks(self, world):
        grid, sc, sim = world
        f = make_features(grid, sc, sim, GridIndex(5, 5), 9, 3)
        assert f.wide_input().shape == (3, 9, 9)
        assert f.local_input().shape == (1, 3, 3)
