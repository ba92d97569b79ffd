"""Received-power map prediction toolkit.

Pipeline: simulate a radio map deterministically over a building grid,
pre-train a dual-CNN regressor on the simulation, augment a small set of
measurements with simulated spatial differences, fine-tune, and benchmark
against linear interpolation, ordinary Kriging, and offset-corrected
simulation.
"""

from .grid import GridIndex, HeightGrid, RadioMap, Sample, Scenario

__all__ = [
    "GridIndex",
    "HeightGrid",
    "RadioMap",
    "Sample",
    "Scenario",
]

__version__ = "0.1.0"
