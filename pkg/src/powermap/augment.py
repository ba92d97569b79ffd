"""Simulation-assisted data augmentation.

Each measurement is expanded into an N x N block of pseudo-measurements:
the simulated map's spatial differences relative to the measured cell are
added to the measured value, so every pseudo-label keeps the exact simulated
difference to its source.  Feature maps are rebuilt at each shifted cell.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import features
from .dataset import Dataset, build_dataset
from .grid import GridIndex, HeightGrid, RadioMap, Sample, Scenario


@dataclass(frozen=True)
class DifferenceMap:
    """Per-neighbour simulated power offsets around a center cell.

    ``offsets[dr + size//2, dc + size//2]`` is the simulated power at the
    neighbour minus the simulated power at the center; missing neighbours
    (off-grid or inside buildings) are NaN.  The center entry is exactly 0.
    """

    size: int
    offsets: np.ndarray


@dataclass(frozen=True)
class ExpandedSample:
    """A measurement replicated over an N x N block."""

    size: int
    power: float

    def as_map(self) -> np.ndarray:
        return np.full((self.size, self.size), self.power)


def difference_map(sim_map: RadioMap, center: GridIndex, n: int = 3) -> DifferenceMap:
    """Simulated spatial differences in the N x N block around ``center``."""
    if n % 2 != 1 or n < 1:
        raise ValueError(f"block size must be odd, got {n}")
    if not sim_map.available_at(center):
        raise ValueError(f"center {center} is not available in the simulated map")
    half = n // 2
    center_power = sim_map.power_at(center)
    offsets = np.full((n, n), np.nan)
    for dr in range(-half, half + 1):
        for dc in range(-half, half + 1):
            r, c = center.row + dr, center.col + dc
            if 0 <= r < sim_map.grid.height and 0 <= c < sim_map.grid.width:
                if sim_map.availability[r, c]:
                    offsets[dr + half, dc + half] = sim_map.power[r, c] - center_power
    offsets[half, half] = 0.0
    return DifferenceMap(n, offsets)


def augment_sample(sample: Sample, sim_map: RadioMap, n: int = 3) -> list[Sample]:
    """Pseudo-measurements at every available neighbour of one sample.

    The center emits the original sample unchanged; each other available
    neighbour gets the measured power plus the simulated difference.  Order
    is row-major over the block.
    """
    diff = difference_map(sim_map, sample.index, n)
    half = n // 2
    out = []
    for dr in range(-half, half + 1):
        for dc in range(-half, half + 1):
            d = diff.offsets[dr + half, dc + half]
            if np.isnan(d):
                continue
            if dr == 0 and dc == 0:
                out.append(sample)
            else:
                out.append(
                    Sample(GridIndex(sample.index.col + dc, sample.index.row + dr),
                           sample.power + float(d))
                )
    return out


def augment_dataset(
    samples: list[Sample],
    grid: HeightGrid,
    scenario: Scenario,
    sim_map: RadioMap,
    n: int = 3,
    window: int = features.DEFAULT_WINDOW,
    srp_size: int = features.DEFAULT_SRP_SIZE,
) -> Dataset:
    """Augment every sample and attach features at each shifted cell.

    Blocks from nearby measurements can collide on a cell; the sample whose
    source measurement is nearest wins (ties: first in input order).  Rows
    come out sorted by source position in the input, then block offset.
    """
    chosen: dict[GridIndex, tuple[float, int, int, Sample]] = {}
    for si, sample in enumerate(samples):
        for oi, aug in enumerate(augment_sample(sample, sim_map, n)):
            dist = float(
                np.hypot(aug.index.col - sample.index.col, aug.index.row - sample.index.row)
            )
            prev = chosen.get(aug.index)
            # sources are visited in input order, so a strict < keeps the
            # first source on distance ties
            if prev is None or dist < prev[0]:
                chosen[aug.index] = (dist, si, oi, aug)
    picked = sorted(chosen.values(), key=lambda t: (t[1], t[2]))
    rows = [t[3] for t in picked]
    groups = [t[1] for t in picked]
    return build_dataset(
        rows, grid, scenario, sim_map, window, srp_size,
        provenance="augmented", groups=groups,
    )
