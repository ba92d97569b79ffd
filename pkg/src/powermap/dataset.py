"""Feature-labelled training rows, stacked for batched training."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import features
from .grid import GridIndex, HeightGrid, RadioMap, Sample, Scenario


@dataclass
class Dataset:
    """Rows of (feature stack, grid index, target dBm) with one provenance.

    ``groups`` ties augmented rows back to their source measurement (row
    index of the original sample); plain datasets get one group per row.
    """

    wide: np.ndarray    # (n, 3, W, W)
    local: np.ndarray   # (n, 1, S, S)
    indices: list[GridIndex]
    targets: np.ndarray  # (n,) dBm
    provenance: str
    groups: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.indices)
        if self.wide.shape[0] != n or self.local.shape[0] != n or self.targets.shape != (n,):
            raise ValueError(
                f"row counts disagree: wide {self.wide.shape[0]}, "
                f"local {self.local.shape[0]}, targets {self.targets.shape}, indices {n}"
            )
        if not np.all(np.isfinite(self.targets)):
            raise ValueError("targets must be finite")
        if len(set(self.indices)) != n:
            raise ValueError(f"duplicate grid index within provenance {self.provenance!r}")
        if self.groups is not None and len(self.groups) != n:
            raise ValueError("groups length mismatch")

    def __len__(self) -> int:
        return len(self.indices)

    def subset(self, ids) -> "Dataset":
        ids = np.asarray(ids, dtype=int)
        return Dataset(
            wide=self.wide[ids],
            local=self.local[ids],
            indices=[self.indices[i] for i in ids],
            targets=self.targets[ids],
            provenance=self.provenance,
            groups=None if self.groups is None else self.groups[ids],
        )


def build_dataset(
    samples: list[Sample],
    grid: HeightGrid,
    scenario: Scenario,
    sim_map: RadioMap,
    window: int = features.DEFAULT_WINDOW,
    srp_size: int = features.DEFAULT_SRP_SIZE,
    provenance: str = "measured",
    groups=None,
) -> Dataset:
    """Attach feature stacks to samples, one row per sample."""
    n = len(samples)
    wide = np.empty((n, 3, window, window))
    local = np.empty((n, 1, srp_size, srp_size))
    targets = np.empty(n)
    for i, s in enumerate(samples):
        f = features.make_features(grid, scenario, sim_map, s.index, window, srp_size)
        wide[i] = f.wide_input()
        local[i] = f.local_input()
        targets[i] = s.power
    return Dataset(
        wide=wide,
        local=local,
        indices=[s.index for s in samples],
        targets=targets,
        provenance=provenance,
        groups=np.arange(n) if groups is None else np.asarray(groups),
    )
