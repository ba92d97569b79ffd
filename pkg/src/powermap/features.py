"""Per-location input maps for the prediction model.

Four maps are built for each receiver cell: distance to the base station,
distance to the window center, building heights, and the simulated received
power patch (SRP).  All are normalized to [0, 1] with fixed constants so the
feature scale is identical between pre-training and fine-tuning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .grid import GridIndex, HeightGrid, RadioMap, Scenario

# Fixed normalization constants, echoed into saved weights.
DISTANCE_NORM_M = 500.0
HEIGHT_NORM_M = 26.0
POWER_MIN_DBM = -110.0
POWER_MAX_DBM = -40.0

# Receiver evaluation height for distance features (chest height of a
# pedestrian), independent of the scenario's receiver altitude.
EVAL_HEIGHT_M = 1.0

DEFAULT_WINDOW = 65
DEFAULT_SRP_SIZE = 3


@dataclass(frozen=True)
class FeatureTensor:
    """The four input maps for one receiver location."""

    bs_distance: np.ndarray  # (W, W)
    ms_distance: np.ndarray  # (W, W)
    building: np.ndarray     # (W, W)
    srp: np.ndarray          # (S, S)

    def wide_input(self) -> np.ndarray:
        """Stack of the three wide maps, shape (3, W, W)."""
        return np.stack([self.bs_distance, self.ms_distance, self.building])

    def local_input(self) -> np.ndarray:
        """SRP map with a channel axis, shape (1, S, S)."""
        return self.srp[None, :, :]


def _require_odd(size: int, name: str) -> None:
    if size % 2 != 1 or size < 1:
        raise ValueError(f"{name} must be odd and positive, got {size}")


def normalize_power(p):
    """Map dBm to [0, 1] over the fixed power range, clamped."""
    return np.clip((p - POWER_MIN_DBM) / (POWER_MAX_DBM - POWER_MIN_DBM), 0.0, 1.0)


def denormalize_power(y):
    """Inverse of normalize_power on the unclamped interior."""
    return POWER_MIN_DBM + (POWER_MAX_DBM - POWER_MIN_DBM) * y


def bs_distance_map(
    grid: HeightGrid, scenario: Scenario, center: GridIndex, window: int = DEFAULT_WINDOW
) -> np.ndarray:
    """3D distance from the base station to each window cell, normalized.

    Distances are analytic, so windows may extend past the grid edge.
    """
    _require_odd(window, "window")
    half = window // 2
    x0, y0 = grid.origin
    cs = grid.cell_size
    cols = center.col + np.arange(window) - half
    rows = center.row + np.arange(window) - half
    x = x0 + (cols + 0.5) * cs
    y = y0 + (rows + 0.5) * cs
    bx, by, bz = scenario.bs_position
    d = np.sqrt(
        (x[None, :] - bx) ** 2
        + (y[:, None] - by) ** 2
        + (EVAL_HEIGHT_M - bz) ** 2
    )
    return np.clip(d / DISTANCE_NORM_M, 0.0, 1.0)


@lru_cache(maxsize=8)
def _ms_distance_cached(window: int) -> np.ndarray:
    half = window // 2
    offsets = np.arange(window) - half
    d = np.hypot(offsets[None, :], offsets[:, None])
    corner = math.hypot(half, half) if half > 0 else 1.0
    out = d / corner
    out.flags.writeable = False
    return out


def ms_distance_map(window: int = DEFAULT_WINDOW) -> np.ndarray:
    """Distance of each pixel to the window center, 1.0 at the corners.

    Identical for every sample of a given window size; independent of grid
    and base station.
    """
    _require_odd(window, "window")
    return _ms_distance_cached(window)


def building_height_map(
    grid: HeightGrid, center: GridIndex, window: int = DEFAULT_WINDOW
) -> np.ndarray:
    """Building heights over the window, normalized; off-grid cells are 0."""
    _require_odd(window, "window")
    half = window // 2
    out = np.zeros((window, window))
    r0, r1 = center.row - half, center.row + half + 1
    c0, c1 = center.col - half, center.col + half + 1
    gr0, gc0 = max(r0, 0), max(c0, 0)
    gr1, gc1 = min(r1, grid.height), min(c1, grid.width)
    if gr1 > gr0 and gc1 > gc0:
        out[gr0 - r0 : gr1 - r0, gc0 - c0 : gc1 - c0] = grid.heights[gr0:gr1, gc0:gc1]
    return np.clip(out / HEIGHT_NORM_M, 0.0, 1.0)


def srp_map(
    sim_map: RadioMap, center: GridIndex, size: int = DEFAULT_SRP_SIZE
) -> np.ndarray:
    """Simulated received power patch around the center, normalized.

    Unavailable or off-grid neighbours take the center's value.
    """
    _require_odd(size, "size")
    if not sim_map.available_at(center):
        raise ValueError(f"srp center {center} is not available in the simulated map")
    half = size // 2
    center_power = sim_map.power_at(center)
    out = np.full((size, size), center_power)
    for dr in range(-half, half + 1):
        for dc in range(-half, half + 1):
            r, c = center.row + dr, center.col + dc
            if 0 <= r < sim_map.grid.height and 0 <= c < sim_map.grid.width:
                if sim_map.availability[r, c]:
                    out[dr + half, dc + half] = sim_map.power[r, c]
    return normalize_power(out)


def make_features(
    grid: HeightGrid,
    scenario: Scenario,
    sim_map: RadioMap,
    center: GridIndex,
    window: int = DEFAULT_WINDOW,
    srp_size: int = DEFAULT_SRP_SIZE,
) -> FeatureTensor:
    """Assemble the four input maps for one receiver cell."""
    return FeatureTensor(
        bs_distance=bs_distance_map(grid, scenario, center, window),
        ms_distance=ms_distance_map(window),
        building=building_height_map(grid, center, window),
        srp=srp_map(sim_map, center, srp_size),
    )
