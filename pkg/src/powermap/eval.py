"""Dataset splits, metrics, and the five-method benchmark harness.

The benchmark simulates a clean map, derives a synthetic "measured" truth
via the perturbation mode, draws uniformly spaced measurement cells, splits
them, and scores the proposed model against no-pretraining learning, linear
interpolation, ordinary Kriging, and the offset-corrected simulation, each
with and without data augmentation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import baselines, model as model_mod
from .augment import augment_dataset
from .dataset import Dataset, build_dataset
from .errors import ReportError, ShapeError, SplitError
from .grid import GridIndex, HeightGrid, RadioMap, Sample, Scenario
from .model import ModelConfig, build_model, finetune, predict_at, pretrain
from .raysim import PerturbationSpec, simulate_map, synthetic_truth

METHODS = ("proposed", "no_pretrain", "linear", "kriging", "offset")


@dataclass(frozen=True)
class SplitSpec:
    """How to partition samples: seeded shuffle or rectangle extraction."""

    mode: str = "random"
    ratio: float = 0.8
    rect: tuple[int, int, int, int] | None = None  # col0, row0, col1, row1 (exclusive)
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("random", "area"):
            raise ValueError(f"unknown split mode {self.mode!r}")
        if self.mode == "random" and not (0.0 < self.ratio < 1.0):
            raise ValueError(f"ratio must be in (0, 1), got {self.ratio}")
        if self.mode == "area" and self.rect is None:
            raise ValueError("area mode needs a rectangle")


def _indices_of(data) -> list[GridIndex]:
    if isinstance(data, Dataset):
        return data.indices
    return [s.index for s in data]


def _take(data, ids):
    if isinstance(data, Dataset):
        return data.subset(ids)
    return [data[i] for i in ids]


def split(data, spec: SplitSpec):
    """Partition a Dataset or sample list into (train, test)."""
    n = len(data)
    if spec.mode == "random":
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([spec.seed, 3])))
        perm = rng.permutation(n)
        train_n = int(round(spec.ratio * n))
        train_ids, test_ids = perm[:train_n], perm[train_n:]
    else:
        c0, r0, c1, r1 = spec.rect
        inside = [
            i
            for i, ix in enumerate(_indices_of(data))
            if c0 <= ix.col < c1 and r0 <= ix.row < r1
        ]
        inside_set = set(inside)
        train_ids = np.array([i for i in range(n) if i not in inside_set], dtype=int)
        test_ids = np.array(inside, dtype=int)
    if len(train_ids) == 0 or len(test_ids) == 0:
        raise SplitError(
            f"split {spec.mode} produced {len(train_ids)} train / {len(test_ids)} test"
        )
    return _take(data, train_ids), _take(data, test_ids)


def rmse(predictions, truths) -> float:
    """Root of the mean squared prediction error, in dB."""
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1 or p.size < 1:
        raise ShapeError(f"rmse shapes {p.shape} vs {t.shape}")
    return float(np.sqrt(np.mean((p - t) ** 2)))


@dataclass
class PredictionTable:
    """Per-test-point truth and predictions, sorted by truth ascending."""

    split: str
    seed: int
    positions: list[GridIndex]
    truths: np.ndarray
    predictions: dict[str, np.ndarray]


def sorted_prediction_table(
    truths,
    positions: list[GridIndex],
    predictions: dict[str, np.ndarray],
    split: str = "",
    seed: int = 0,
) -> PredictionTable:
    """Sort test rows by true power ascending (stable) and validate columns."""
    t = np.asarray(truths, dtype=np.float64)
    n = t.size
    for name, p in predictions.items():
        p = np.asarray(p)
        if p.shape != (n,):
            raise ReportError(f"method {name!r} predictions have shape {p.shape}, want ({n},)")
        bad = np.nonzero(~np.isfinite(p))[0]
        if bad.size:
            raise ReportError(f"method {name!r} missing prediction at {positions[bad[0]]}")
    order = np.argsort(t, kind="stable")
    return PredictionTable(
        split=split,
        seed=seed,
        positions=[positions[i] for i in order],
        truths=t[order],
        predictions={k: np.asarray(v)[order] for k, v in predictions.items()},
    )


def uniform_measurement_cells(radio_map: RadioMap, count: int) -> list[GridIndex]:
    """Deterministic lattice of `count` available cells over the map.

    Lattice points at the centers of a k x k tiling (k = ceil(sqrt(count)))
    are snapped to the nearest still-unused available cell.
    """
    avail_rows, avail_cols = np.nonzero(radio_map.availability)
    if avail_rows.size < count:
        raise ValueError(f"only {avail_rows.size} available cells for {count} measurements")
    k = int(math.ceil(math.sqrt(count)))
    h, w = radio_map.power.shape
    used = np.zeros(avail_rows.size, dtype=bool)
    out: list[GridIndex] = []
    for i in range(k):
        for j in range(k):
            if len(out) >= count:
                break
            r_t = (i + 0.5) * h / k
            c_t = (j + 0.5) * w / k
            d2 = (avail_rows + 0.5 - r_t) ** 2 + (avail_cols + 0.5 - c_t) ** 2
            d2[used] = np.inf
            pick = int(np.argmin(d2))
            used[pick] = True
            out.append(GridIndex(int(avail_cols[pick]), int(avail_rows[pick])))
    return out


@dataclass
class BenchmarkConfig:
    """Everything the benchmark needs beyond world and perturbation."""

    model: ModelConfig
    splits: list[tuple[str, SplitSpec]]
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    measurement_count: int = 100
    augment_n: int = 3
    pretrain_epochs: int = 40
    finetune_epochs: int = 100
    batch_size: int = 64
    pretrain_lr: float = 0.002
    finetune_lr: float = 0.0005
    pretrain_seed: int = 1000
    pretrain_subsample: int = 9
    workers: int = 1


@dataclass
class ReportEntry:
    split: str
    method: str
    augmented: bool
    seed: int
    rmse: float


@dataclass
class BenchmarkReport:
    seeds: list[int]
    entries: list[ReportEntry] = field(default_factory=list)
    tables: list[PredictionTable] = field(default_factory=list)
    pretrain_curve: model_mod.TrainingCurve | None = None

    def rmse_values(self, split: str, method: str, augmented: bool) -> list[float]:
        return [
            e.rmse
            for e in self.entries
            if e.split == split and e.method == method and e.augmented == augmented
        ]

    def median_rmse(self, split: str, method: str, augmented: bool) -> float:
        values = self.rmse_values(split, method, augmented)
        if not values:
            raise ReportError(f"no entries for {split}/{method}/aug={augmented}")
        return float(np.median(values))


def _stage_seed(seed: int, stage: int) -> int:
    return int(np.random.SeedSequence([seed, stage]).generate_state(1)[0])


def _pretrain_dataset(grid, scenario, sim_map, config) -> Dataset:
    cells = sim_map.available_indices()[:: config.pretrain_subsample]
    samples = [Sample(ix, sim_map.power_at(ix)) for ix in cells]
    return build_dataset(
        samples, grid, scenario, sim_map,
        config.model.window, config.model.srp_size, provenance="simulated",
    )


def pretrain_on_simulation(
    grid: HeightGrid, scenario: Scenario, sim_map: RadioMap, config: BenchmarkConfig
):
    """Build and pre-train the shared model on the clean simulated map."""
    ds = _pretrain_dataset(grid, scenario, sim_map, config)
    base = build_model(config.model, seed=config.pretrain_seed)
    return pretrain(
        base, ds,
        epochs=config.pretrain_epochs,
        batch_size=config.batch_size,
        learning_rate=config.pretrain_lr,
        seed=config.pretrain_seed,
    )


def _evaluate_methods(
    grid, scenario, sim_map, pretrained, train_samples, test_samples, config, seed
):
    """RMSE for all five methods, with and without augmentation."""
    cfg = config.model
    test_idx = [s.index for s in test_samples]
    test_truth = np.array([s.power for s in test_samples])
    ft_seed = _stage_seed(seed, 12)
    init_seed = _stage_seed(seed, 13)

    results: dict[tuple[str, bool], np.ndarray] = {}
    for augmented in (True, False):
        if augmented:
            ds = augment_dataset(
                train_samples, grid, scenario, sim_map,
                config.augment_n, cfg.window, cfg.srp_size,
            )
        else:
            ds = build_dataset(
                train_samples, grid, scenario, sim_map,
                cfg.window, cfg.srp_size, provenance="measured",
            )
        train_points = [Sample(ix, t) for ix, t in zip(ds.indices, ds.targets)]

        ft = finetune(
            pretrained, ds,
            epochs=config.finetune_epochs,
            batch_size=config.batch_size,
            learning_rate=config.finetune_lr,
            seed=ft_seed,
        )
        results[("proposed", augmented)] = predict_at(ft, grid, scenario, sim_map, test_idx)

        fresh = build_model(cfg, seed=init_seed)
        scratch = finetune(
            fresh, ds,
            epochs=config.finetune_epochs,
            batch_size=config.batch_size,
            learning_rate=config.finetune_lr,
            seed=ft_seed,
        )
        results[("no_pretrain", augmented)] = predict_at(
            scratch, grid, scenario, sim_map, test_idx
        )

        results[("linear", augmented)] = np.array(
            [baselines.linear_interp_predict(train_points, ix, grid.cell_size) for ix in test_idx]
        )
        bins = baselines.empirical_variogram(train_points, cell_size=grid.cell_size)
        vmodel = baselines.fit_variogram(bins)
        results[("kriging", augmented)] = np.array(
            [baselines.kriging_predict(train_points, vmodel, ix, grid.cell_size)[0] for ix in test_idx]
        )
        pairs = [(s.power, sim_map.power_at(s.index)) for s in train_points]
        omodel = baselines.offset_fit(pairs)
        results[("offset", augmented)] = np.array(
            [baselines.offset_predict(sim_map, omodel, ix) for ix in test_idx]
        )
    return results, test_idx, test_truth


def run_benchmark(
    grid: HeightGrid,
    scenario: Scenario,
    perturbation: PerturbationSpec,
    config: BenchmarkConfig,
    pretrained=None,
    sim_map: RadioMap | None = None,
) -> BenchmarkReport:
    """Full five-method benchmark over the configured splits and seeds.

    ``pretrained``/``sim_map`` may be supplied to reuse work across calls;
    both are rebuilt deterministically when omitted, so results are
    identical either way.
    """
    if sim_map is None:
        sim_map = simulate_map(grid, scenario, workers=config.workers)
    report = BenchmarkReport(seeds=list(config.seeds))
    if pretrained is None:
        pretrained, curve = pretrain_on_simulation(grid, scenario, sim_map, config)
        report.pretrain_curve = curve
    positions = uniform_measurement_cells(sim_map, config.measurement_count)

    for seed in config.seeds:
        truth = synthetic_truth(
            grid, scenario,
            replace(perturbation, seed=_stage_seed(seed, 10)),
            workers=config.workers,
        )
        measurements = [Sample(ix, truth.power_at(ix)) for ix in positions]
        for split_name, spec in config.splits:
            if spec.mode == "random":
                spec_seeded = replace(spec, seed=_stage_seed(seed, 11))
            else:
                spec_seeded = spec
            train_s, test_s = split(measurements, spec_seeded)
            results, test_idx, test_truth = _evaluate_methods(
                grid, scenario, sim_map, pretrained, train_s, test_s, config, seed
            )
            for (method, augmented), preds in results.items():
                report.entries.append(
                    ReportEntry(
                        split=split_name,
                        method=method,
                        augmented=augmented,
                        seed=seed,
                        rmse=rmse(preds, test_truth),
                    )
                )
            report.tables.append(
                sorted_prediction_table(
                    test_truth,
                    test_idx,
                    {m: results[(m, True)] for m in METHODS},
                    split=split_name,
                    seed=seed,
                )
            )
    return report


# ---------------------------------------------------------------------------
# report serialization (byte-stable: no timestamps, fixed ordering)

def format_report_text(report: BenchmarkReport) -> str:
    lines = ["received-power benchmark report", ""]
    lines.append("seeds: " + " ".join(str(s) for s in report.seeds))
    lines.append("")
    lines.append(f"{'split':<12} {'method':<14} {'augmented':<10} {'median_rmse_db':>14}")
    lines.append("-" * 52)
    seen = []
    for e in report.entries:
        key = (e.split, e.method, e.augmented)
        if key not in seen:
            seen.append(key)
    for split_name, method, augmented in seen:
        med = report.median_rmse(split_name, method, augmented)
        lines.append(
            f"{split_name:<12} {method:<14} {'yes' if augmented else 'no':<10} {med:>14.4f}"
        )
    lines.append("")
    return "\n".join(lines)


def format_report_kv(report: BenchmarkReport) -> str:
    """Machine-readable blocks: one `key = value` group per record."""
    lines = ["# powermap benchmark report", "# block types: meta, rmse, row", ""]
    lines.append("[meta]")
    lines.append("seeds = " + ",".join(str(s) for s in report.seeds))
    lines.append("")
    for e in report.entries:
        lines.append("[rmse]")
        lines.append(f"split = {e.split}")
        lines.append(f"method = {e.method}")
        lines.append(f"augmented = {int(e.augmented)}")
        lines.append(f"seed = {e.seed}")
        lines.append(f"rmse = {e.rmse!r}")
        lines.append("")
    for t in report.tables:
        methods = list(t.predictions.keys())
        for i, (pos, truth) in enumerate(zip(t.positions, t.truths)):
            lines.append("[row]")
            lines.append(f"split = {t.split}")
            lines.append(f"seed = {t.seed}")
            lines.append(f"rank = {i}")
            lines.append(f"position = {pos.col},{pos.row}")
            lines.append(f"truth = {truth!r}")
            for m in methods:
                lines.append(f"{m} = {t.predictions[m][i]!r}")
            lines.append("")
    return "\n".join(lines)


def write_report(report: BenchmarkReport, base_path) -> tuple[str, str]:
    """Write `<base>.txt` and `<base>.kv`; returns the two paths."""
    txt = f"{base_path}.txt"
    kv = f"{base_path}.kv"
    with open(txt, "w", encoding="ascii") as fh:
        fh.write(format_report_text(report))
    with open(kv, "w", encoding="ascii") as fh:
        fh.write(format_report_kv(report))
    return txt, kv
