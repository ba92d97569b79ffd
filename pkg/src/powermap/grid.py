"""World model: uniform-grid geometry, scenarios, radio maps, and samples.

Conventions used throughout the package:

* world coordinates are meters on a flat ground plane, z up;
* ``heights[row, col]`` with row 0 at the smallest y;
* a cell is *inside a building* (and excluded as a receiver position) when
  its height exceeds the receiver altitude.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError


@dataclass(frozen=True, order=True)
class GridIndex:
    """Column/row subscript of one grid cell."""

    col: int
    row: int


@dataclass(frozen=True)
class HeightGrid:
    """2.5D terrain-plus-building height field on a uniform grid."""

    heights: np.ndarray
    cell_size: float = 1.0
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        h = np.asarray(self.heights, dtype=np.float64)
        if h.ndim != 2 or h.shape[0] < 1 or h.shape[1] < 1:
            raise ValueError(f"heights must be a 2D array, got shape {h.shape}")
        if not (self.cell_size > 0):
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")
        if not np.all(np.isfinite(h)):
            raise ValueError("heights must be finite")
        if np.any(h < 0):
            raise ValueError("heights must be non-negative")
        h.flags.writeable = False
        object.__setattr__(self, "heights", h)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def width(self) -> int:
        return self.heights.shape[1]

    @property
    def height(self) -> int:
        return self.heights.shape[0]

    def in_bounds(self, index: GridIndex) -> bool:
        return 0 <= index.col < self.width and 0 <= index.row < self.height

    def height_at(self, index: GridIndex) -> float:
        if not self.in_bounds(index):
            raise IndexError(f"index {index} outside {self.width}x{self.height} grid")
        return float(self.heights[index.row, index.col])

    def cell_center(self, index: GridIndex, altitude: float) -> tuple[float, float, float]:
        """World position of the center of ``index`` at the given altitude."""
        if not self.in_bounds(index):
            raise IndexError(f"index {index} outside {self.width}x{self.height} grid")
        x0, y0 = self.origin
        return (
            x0 + (index.col + 0.5) * self.cell_size,
            y0 + (index.row + 0.5) * self.cell_size,
            float(altitude),
        )


@dataclass(frozen=True)
class Scenario:
    """Transmitter/receiver configuration for one simulation run.

    Defaults are the reference urban-campus configuration: 5.64 GHz carrier,
    21 dBm transmit power, base station antenna at 14 m, receivers at 1 m,
    at most 2 reflections and 3 diffractions per path.
    """

    bs_position: tuple[float, float, float]
    frequency: float = 5.64e9
    tx_power: float = 21.0
    ms_altitude: float = 1.0
    max_reflections: int = 2
    max_diffractions: int = 3

    def __post_init__(self):
        if not (self.frequency > 0):
            raise ValueError(f"frequency must be positive, got {self.frequency}")
        if self.max_reflections < 0 or self.max_diffractions < 0:
            raise ValueError("path-order limits must be non-negative")
        if self.ms_altitude < 0:
            raise ValueError("ms_altitude must be non-negative")
        object.__setattr__(self, "bs_position", tuple(float(v) for v in self.bs_position))


@dataclass(frozen=True)
class RadioMap:
    """Per-cell received power in dBm; cells inside buildings are unavailable."""

    grid: HeightGrid
    power: np.ndarray
    availability: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.power, dtype=np.float64)
        a = np.asarray(self.availability, dtype=bool)
        shape = (self.grid.height, self.grid.width)
        if p.shape != shape or a.shape != shape:
            raise ValueError(
                f"power/availability shape {p.shape}/{a.shape} does not match grid {shape}"
            )
        if not np.all(np.isfinite(p[a])):
            raise ValueError("available cells must hold finite dBm values")
        p.flags.writeable = False
        a.flags.writeable = False
        object.__setattr__(self, "power", p)
        object.__setattr__(self, "availability", a)

    def available_at(self, index: GridIndex) -> bool:
        if not self.grid.in_bounds(index):
            raise IndexError(f"index {index} outside {self.grid.width}x{self.grid.height} grid")
        return bool(self.availability[index.row, index.col])

    def power_at(self, index: GridIndex) -> float:
        if not self.grid.in_bounds(index):
            raise IndexError(f"index {index} outside {self.grid.width}x{self.grid.height} grid")
        return float(self.power[index.row, index.col])

    def available_indices(self) -> list[GridIndex]:
        rows, cols = np.nonzero(self.availability)
        return [GridIndex(int(c), int(r)) for r, c in zip(rows, cols)]


@dataclass(frozen=True)
class Sample:
    """One measured (or pseudo-measured) received power value."""

    index: GridIndex
    power: float

    def __post_init__(self):
        if not math.isfinite(self.power):
            raise ValueError(f"sample power must be finite, got {self.power}")


def grid_from_rects(
    width: int,
    height: int,
    rects: list[tuple[int, int, int, int, float]],
    cell_size: float = 1.0,
) -> HeightGrid:
    """Flat grid with rectangular buildings.

    Each rect is (col0, row0, col1, row1, height) with exclusive upper
    bounds, clipped to the grid.
    """
    h = np.zeros((height, width))
    for c0, r0, c1, r1, hgt in rects:
        h[max(r0, 0) : max(r1, 0), max(c0, 0) : max(c1, 0)] = hgt
    return HeightGrid(h, cell_size=cell_size)


def quantize_heights(grid: HeightGrid, levels: list[float]) -> HeightGrid:
    """Snap every height to the nearest of ``levels``; ties break low.

    ``levels`` must be non-empty, sorted ascending, and include 0.
    """
    if len(levels) == 0:
        raise ValueError("levels must be non-empty")
    lv = np.asarray(levels, dtype=np.float64)
    if np.any(np.diff(lv) <= 0):
        raise ValueError("levels must be strictly ascending")
    if lv[0] != 0.0 and 0.0 not in lv:
        raise ValueError("levels must include 0")
    # argmin returns the first (lowest) level on a tie because lv is ascending
    nearest = np.argmin(np.abs(grid.heights[:, :, None] - lv[None, None, :]), axis=2)
    return HeightGrid(lv[nearest], cell_size=grid.cell_size, origin=grid.origin)


def _parse_header(line: str, lineno: int) -> tuple[int, int, float]:
    parts = line.split()
    if len(parts) != 3:
        raise ParseError(f"header must be 'width height cell_size', got {line!r}", lineno)
    try:
        width, height = int(parts[0]), int(parts[1])
        cell_size = float(parts[2])
    except ValueError as exc:
        raise ParseError(f"non-numeric header field: {exc}", lineno) from None
    if width < 1 or height < 1 or not (cell_size > 0):
        raise ParseError(f"invalid dimensions {width}x{height} cell {cell_size}", lineno)
    return width, height, cell_size


def _parse_rows(lines: list[str], width: int, height: int, allow_nan: bool) -> np.ndarray:
    if len(lines) < height + 1:
        raise ParseError(f"expected {height} data rows, found {len(lines) - 1}", len(lines))
    values = np.empty((height, width), dtype=np.float64)
    for r in range(height):
        lineno = r + 2
        parts = lines[r + 1].split()
        if len(parts) != width:
            raise ParseError(f"expected {width} values, found {len(parts)}", lineno)
        try:
            row = np.array([float(p) for p in parts], dtype=np.float64)
        except ValueError as exc:
            raise ParseError(f"non-numeric cell: {exc}", lineno) from None
        if not allow_nan and not np.all(np.isfinite(row)):
            raise ParseError("non-finite height value", lineno)
        values[r] = row
    return values


def load_height_grid(path) -> HeightGrid:
    """Read a height-grid text file (header then one row of heights per line)."""
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty file", 1)
    width, height, cell_size = _parse_header(lines[0], 1)
    values = _parse_rows(lines, width, height, allow_nan=False)
    return HeightGrid(values, cell_size=cell_size)


def save_height_grid(grid: HeightGrid, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{grid.width} {grid.height} {grid.cell_size:.10g}\n")
        for r in range(grid.height):
            fh.write(" ".join(f"{v:.10g}" for v in grid.heights[r]) + "\n")


def load_radio_map(path, grid: HeightGrid | None = None) -> RadioMap:
    """Read a radio-map text file; ``nan`` cells are unavailable.

    When ``grid`` is omitted a flat grid with the file's dimensions is used.
    """
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty file", 1)
    width, height, cell_size = _parse_header(lines[0], 1)
    if grid is None:
        grid = HeightGrid(np.zeros((height, width)), cell_size=cell_size)
    elif grid.width != width or grid.height != height:
        raise ParseError(
            f"map is {width}x{height} but grid is {grid.width}x{grid.height}", 1
        )
    values = _parse_rows(lines, width, height, allow_nan=True)
    return RadioMap(grid, values, np.isfinite(values))


def save_radio_map(radio_map: RadioMap, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(
            f"{radio_map.grid.width} {radio_map.grid.height} "
            f"{radio_map.grid.cell_size:.10g}\n"
        )
        for r in range(radio_map.grid.height):
            cells = [
                f"{v:.10g}" if a else "nan"
                for v, a in zip(radio_map.power[r], radio_map.availability[r])
            ]
            fh.write(" ".join(cells) + "\n")
