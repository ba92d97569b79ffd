"""Comparison predictors: linear interpolation, ordinary Kriging, offset fit.

These operate directly on (grid index, dBm) samples; distances are measured
in meters through the grid's cell size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import FitError, NumericError
from .grid import GridIndex, RadioMap, Sample

KRIGING_NEIGHBOURS = 32


@dataclass(frozen=True)
class VariogramModel:
    """Exponential variogram: gamma(h) = nugget + sill * (1 - exp(-h/range))."""

    nugget: float
    sill: float
    range_m: float

    def __post_init__(self):
        if self.nugget < 0 or self.sill < 0:
            raise ValueError("nugget and sill must be non-negative")
        if not (self.range_m > 0):
            raise ValueError("range must be positive")

    def __call__(self, h):
        return self.nugget * (np.asarray(h) > 0) + self.sill * (
            1.0 - np.exp(-np.asarray(h) / self.range_m)
        )


@dataclass(frozen=True)
class OffsetModel:
    """Constant dB correction added to the simulated map."""

    alpha: float

    def __post_init__(self):
        if not math.isfinite(self.alpha):
            raise ValueError("offset must be finite")


def _positions(samples: list[Sample], cell_size: float = 1.0) -> np.ndarray:
    return np.array(
        [((s.index.col + 0.5) * cell_size, (s.index.row + 0.5) * cell_size) for s in samples]
    )


def linear_interp_predict(
    samples: list[Sample], target: GridIndex, cell_size: float = 1.0
) -> float:
    """Inverse-distance average of the nearest sample in each quadrant.

    Quadrants are taken around the target; a sample exactly at the target is
    returned verbatim.  Quadrants without samples simply contribute nothing,
    so any non-empty sample set yields a prediction.
    """
    if not samples:
        raise ValueError("need at least one sample")
    tx = (target.col + 0.5) * cell_size
    ty = (target.row + 0.5) * cell_size
    nearest: dict[tuple[bool, bool], tuple[float, float]] = {}
    for s in samples:
        if s.index == target:
            return s.power
        dx = (s.index.col + 0.5) * cell_size - tx
        dy = (s.index.row + 0.5) * cell_size - ty
        quad = (dx >= 0, dy >= 0)
        d = math.hypot(dx, dy)
        if quad not in nearest or d < nearest[quad][0]:
            nearest[quad] = (d, s.power)
    weights = [(1.0 / d, p) for d, p in nearest.values()]
    total = sum(w for w, _ in weights)
    return sum(w * p for w, p in weights) / total


def empirical_variogram(
    samples: list[Sample],
    bin_width: float = 5.0,
    max_lag: float = 100.0,
    cell_size: float = 1.0,
) -> list[tuple[float, float, int]]:
    """Binned semivariance estimate: (mean lag, gamma-hat, pair count).

    gamma-hat is the mean of half squared differences over the pairs falling
    in each distance bin; empty bins are omitted.
    """
    if len(samples) < 2:
        raise ValueError("need at least two samples")
    pos = _positions(samples, cell_size)
    vals = np.array([s.power for s in samples])
    diff = pos[:, None, :] - pos[None, :, :]
    d = np.sqrt((diff**2).sum(axis=2))
    sv = 0.5 * (vals[:, None] - vals[None, :]) ** 2
    iu = np.triu_indices(len(samples), k=1)
    d, sv = d[iu], sv[iu]
    keep = d <= max_lag
    d, sv = d[keep], sv[keep]
    bins = []
    nbins = int(math.ceil(max_lag / bin_width))
    for b in range(nbins):
        sel = (d >= b * bin_width) & (d < (b + 1) * bin_width)
        count = int(sel.sum())
        if count > 0:
            bins.append((float(d[sel].mean()), float(sv[sel].mean()), count))
    return bins


def _wls_nugget_sill(h, g, w, range_m):
    """Closed-form weighted least squares for nugget/sill at a fixed range."""
    basis = 1.0 - np.exp(-h / range_m)
    sw = w.sum()
    swb = (w * basis).sum()
    swbb = (w * basis * basis).sum()
    swg = (w * g).sum()
    swbg = (w * basis * g).sum()
    det = sw * swbb - swb * swb
    if abs(det) < 1e-12 * max(sw * swbb, 1.0):
        nugget, sill = 0.0, 0.0
    else:
        nugget = (swbb * swg - swb * swbg) / det
        sill = (sw * swbg - swb * swg) / det
    if nugget < 0:
        nugget = 0.0
        sill = swbg / swbb if swbb > 0 else 0.0
    if sill < 0:
        sill = 0.0
        nugget = swg / sw
    sse = float((w * (nugget + sill * basis - g) ** 2).sum())
    return nugget, sill, sse


def fit_variogram(bins: list[tuple[float, float, int]]) -> VariogramModel:
    """Weighted least-squares exponential fit over a refined range search.

    Pair counts weight the residuals; nugget and sill have closed forms per
    candidate range, and the range is found by a coarse log-spaced scan
    followed by golden-section refinement.
    """
    if len(bins) < 3:
        raise FitError(f"need at least 3 non-empty bins, got {len(bins)}")
    h = np.array([b[0] for b in bins])
    g = np.array([b[1] for b in bins])
    w = np.array([float(b[2]) for b in bins])
    if np.allclose(g, g[0], atol=1e-12):
        # flat surface: pure nugget
        return VariogramModel(nugget=float(max(g[0], 0.0)), sill=0.0, range_m=float(h.max()))

    lo, hi = max(h.min() / 4.0, 1e-3), h.max() * 4.0
    candidates = np.exp(np.linspace(math.log(lo), math.log(hi), 80))
    best_r, best_sse = candidates[0], np.inf
    for r in candidates:
        _, _, sse = _wls_nugget_sill(h, g, w, r)
        if sse < best_sse:
            best_r, best_sse = r, sse
    # golden-section refinement around the best coarse candidate
    phi = (math.sqrt(5.0) - 1.0) / 2.0
    a = best_r / 1.3
    b = best_r * 1.3
    c = b - phi * (b - a)
    d = a + phi * (b - a)
    fc = _wls_nugget_sill(h, g, w, c)[2]
    fd = _wls_nugget_sill(h, g, w, d)[2]
    for _ in range(80):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - phi * (b - a)
            fc = _wls_nugget_sill(h, g, w, c)[2]
        else:
            a, c, fc = c, d, fd
            d = a + phi * (b - a)
            fd = _wls_nugget_sill(h, g, w, d)[2]
    r = 0.5 * (a + b)
    if _wls_nugget_sill(h, g, w, r)[2] > best_sse:
        r = best_r
    nugget, sill, _ = _wls_nugget_sill(h, g, w, r)
    return VariogramModel(nugget=float(nugget), sill=float(sill), range_m=float(r))


def _dedupe_average(samples: list[Sample]) -> list[Sample]:
    seen: dict[GridIndex, list[float]] = {}
    order: list[GridIndex] = []
    for s in samples:
        if s.index not in seen:
            seen[s.index] = []
            order.append(s.index)
        seen[s.index].append(s.power)
    return [Sample(ix, float(np.mean(seen[ix]))) for ix in order]


def kriging_predict(
    samples: list[Sample],
    model: VariogramModel,
    target: GridIndex,
    cell_size: float = 1.0,
) -> tuple[float, float]:
    """Ordinary Kriging estimate and variance at the target cell.

    Solves the semivariance system with a Lagrange multiplier forcing the
    weights to sum to 1, over at most the 32 nearest samples.  Duplicate
    locations are averaged before solving.
    """
    if not samples:
        raise ValueError("need at least one sample")
    samples = _dedupe_average(samples)
    pos = _positions(samples, cell_size)
    tpos = np.array([(target.col + 0.5) * cell_size, (target.row + 0.5) * cell_size])
    d_target = np.sqrt(((pos - tpos) ** 2).sum(axis=1))
    if len(samples) > KRIGING_NEIGHBOURS:
        order = np.lexsort((
            [s.index.row for s in samples],
            [s.index.col for s in samples],
            d_target,
        ))[:KRIGING_NEIGHBOURS]
        samples = [samples[i] for i in order]
        pos = pos[order]
        d_target = d_target[order]
    n = len(samples)
    vals = np.array([s.power for s in samples])
    diff = pos[:, None, :] - pos[None, :, :]
    dmat = np.sqrt((diff**2).sum(axis=2))
    a = np.zeros((n + 1, n + 1))
    a[:n, :n] = model(dmat)
    np.fill_diagonal(a[:n, :n], 0.0)
    a[n, :n] = 1.0
    a[:n, n] = 1.0
    b = np.zeros(n + 1)
    b[:n] = model(d_target)  # gamma(0) = 0, so a coincident sample stays exact
    b[n] = 1.0
    try:
        sol = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"kriging system is singular: {exc}") from None
    weights = sol[:n]
    mu = sol[n]
    estimate = float(weights @ vals)
    variance = float(weights @ b[:n] + mu)
    return estimate, max(variance, 0.0)


def offset_fit(pairs: list[tuple[float, float]]) -> OffsetModel:
    """Least-squares constant offset between measured and simulated values.

    The minimizer of sum((measured - (simulated + alpha))^2) is the mean
    residual.
    """
    if not pairs:
        raise ValueError("need at least one pair")
    residuals = [measured - simulated for measured, simulated in pairs]
    return OffsetModel(alpha=float(np.mean(residuals)))


def offset_predict(sim_map: RadioMap, model: OffsetModel, index: GridIndex) -> float:
    """Simulated value at the cell, shifted by the fitted offset."""
    if not sim_map.available_at(index):
        raise ValueError(f"cell {index} is not available in the simulated map")
    return sim_map.power_at(index) + model.alpha
