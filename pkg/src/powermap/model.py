"""Dual-branch CNN: assembly, training, prediction, and persistence.

A wide branch (three conv/batchnorm/relu/pool stages over the distance and
building maps) and a local branch (two conv/batchnorm/relu stages over the
SRP patch) merge into a dense head that emits one normalized power value.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import features, tensor_nn
from .errors import ConfigError, TransferError, WeightsFormatError
from .grid import GridIndex, HeightGrid, RadioMap, Scenario
from .tensor_nn import (
    avgpool2,
    avgpool2_backward,
    batchnorm,
    batchnorm_backward,
    conv2d_backward_cols,
    conv2d_cols,
    dense,
    dense_backward,
    mse_loss,
    nadam_init,
    nadam_step,
    relu,
    relu_backward,
)

WEIGHTS_MAGIC = b"RPWT"
WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and normalization constants of the predictor."""

    window: int = features.DEFAULT_WINDOW
    srp_size: int = features.DEFAULT_SRP_SIZE
    wide_channels: tuple[int, int, int] = (16, 32, 32)
    wide_kernels: tuple[int, int, int] = (5, 5, 3)
    local_channels: tuple[int, int] = (8, 8)
    local_kernels: tuple[int, int] = (3, 3)
    head_units: int = 64
    head_linear: bool = False
    mask_srp_center: bool = False
    d_norm: float = features.DISTANCE_NORM_M
    h_norm: float = features.HEIGHT_NORM_M
    p_min: float = features.POWER_MIN_DBM
    p_max: float = features.POWER_MAX_DBM

    def __post_init__(self):
        if self.window % 2 != 1 or self.srp_size % 2 != 1:
            raise ConfigError(
                f"window/srp sizes must be odd, got {self.window}/{self.srp_size}"
            )
        if self.pooled_size < 1:
            raise ConfigError(f"window {self.window} collapses below 1 after pooling")
        if len(self.wide_channels) != 3 or len(self.local_channels) != 2:
            raise ConfigError("expected 3 wide and 2 local stages")
        if any(k % 2 != 1 for k in self.wide_kernels + self.local_kernels):
            raise ConfigError("kernel sizes must be odd")
        if not (self.p_max > self.p_min):
            raise ConfigError("power range must be non-degenerate")

    @property
    def pooled_size(self) -> int:
        return self.window // 2 // 2 // 2

    @property
    def wide_flat(self) -> int:
        return self.wide_channels[2] * self.pooled_size**2

    @property
    def local_flat(self) -> int:
        return self.local_channels[1] * self.srp_size**2

    @property
    def concat_dim(self) -> int:
        return self.wide_flat + self.local_flat

    def normalize_target(self, dbm):
        return (np.asarray(dbm, dtype=np.float64) - self.p_min) / (self.p_max - self.p_min)

    def denormalize_output(self, y):
        return self.p_min + (self.p_max - self.p_min) * y


@dataclass
class ModelWeights:
    """Ordered parameter tensors plus batch-norm running statistics."""

    config: ModelConfig
    params: dict[str, np.ndarray]
    running: dict[str, np.ndarray]

    def copy(self) -> "ModelWeights":
        return ModelWeights(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.running.items()},
        )

    def param_names(self) -> list[str]:
        return list(self.params.keys())


def _param_template(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Expected shape of every parameter tensor, in canonical order."""
    shapes: dict[str, tuple[int, ...]] = {}
    in_ch = 3
    for i, (ch, k) in enumerate(zip(config.wide_channels, config.wide_kernels), start=1):
        shapes[f"wide{i}_w"] = (ch, in_ch, k, k)
        shapes[f"wide{i}_b"] = (ch,)
        shapes[f"wide{i}_gamma"] = (ch,)
        shapes[f"wide{i}_beta"] = (ch,)
        in_ch = ch
    in_ch = 1
    for i, (ch, k) in enumerate(zip(config.local_channels, config.local_kernels), start=1):
        shapes[f"local{i}_w"] = (ch, in_ch, k, k)
        shapes[f"local{i}_b"] = (ch,)
        shapes[f"local{i}_gamma"] = (ch,)
        shapes[f"local{i}_beta"] = (ch,)
        in_ch = ch
    shapes["head1_w"] = (config.concat_dim, config.head_units)
    shapes["head1_b"] = (config.head_units,)
    shapes["head2_w"] = (config.head_units, 1)
    shapes["head2_b"] = (1,)
    return shapes


def _bn_layer_names(config: ModelConfig) -> list[str]:
    return [f"wide{i}" for i in (1, 2, 3)] + [f"local{i}" for i in (1, 2)]


def build_model(config: ModelConfig, seed: int) -> ModelWeights:
    """Fresh weights: He-uniform conv/dense init, identity batch norm."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0])))
    params: dict[str, np.ndarray] = {}
    for name, shape in _param_template(config).items():
        if name.endswith("_w"):
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            params[name] = tensor_nn.he_uniform(shape, fan_in, rng)
        elif name.endswith("_gamma"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    running: dict[str, np.ndarray] = {}
    for layer in _bn_layer_names(config):
        ch = params[f"{layer}_gamma"].shape[0]
        running[f"{layer}_mean"] = np.zeros(ch)
        running[f"{layer}_var"] = np.ones(ch)
    return ModelWeights(config, params, running)


def _forward(
    weights: ModelWeights,
    wide_x: np.ndarray,
    local_x: np.ndarray,
    bn_mode: str,
    update_running: bool,
):
    """Shared forward pass; returns (y, caches) with y the normalized output."""
    p, running = weights.params, weights.running
    caches = {"wide": [], "local": []}

    a = wide_x
    for i in (1, 2, 3):
        name = f"wide{i}"
        conv, cols = conv2d_cols(a, p[f"{name}_w"], p[f"{name}_b"])
        bn, bn_cache, rm, rv = batchnorm(
            conv, p[f"{name}_gamma"], p[f"{name}_beta"],
            running[f"{name}_mean"], running[f"{name}_var"], bn_mode,
        )
        if update_running:
            running[f"{name}_mean"], running[f"{name}_var"] = rm, rv
        r = relu(bn)
        pool = avgpool2(r)
        caches["wide"].append((a.shape, cols, bn_cache, bn, r.shape))
        a = pool
    n = a.shape[0]
    wide_flat = a.reshape(n, -1)
    caches["wide_pool_shape"] = a.shape

    a = local_x
    for i in (1, 2):
        name = f"local{i}"
        conv, cols = conv2d_cols(a, p[f"{name}_w"], p[f"{name}_b"])
        bn, bn_cache, rm, rv = batchnorm(
            conv, p[f"{name}_gamma"], p[f"{name}_beta"],
            running[f"{name}_mean"], running[f"{name}_var"], bn_mode,
        )
        if update_running:
            running[f"{name}_mean"], running[f"{name}_var"] = rm, rv
        r = relu(bn)
        caches["local"].append((a.shape, cols, bn_cache, bn))
        a = r
    local_flat = a.reshape(n, -1)
    caches["local_out_shape"] = a.shape

    concat = np.concatenate([wide_flat, local_flat], axis=1)
    h1 = dense(concat, p["head1_w"], p["head1_b"])
    h1_act = h1 if weights.config.head_linear else relu(h1)
    out = dense(h1_act, p["head2_w"], p["head2_b"])
    caches["head"] = (concat, h1, h1_act)
    return out[:, 0], caches


def _backward(weights: ModelWeights, caches, dy: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients for every parameter given d(loss)/d(normalized output)."""
    p = weights.params
    grads: dict[str, np.ndarray] = {}
    concat, h1, h1_act = caches["head"]
    dout = dy[:, None]
    dh1_act, grads["head2_w"], grads["head2_b"] = dense_backward(h1_act, p["head2_w"], dout)
    dh1 = dh1_act if weights.config.head_linear else relu_backward(h1, dh1_act)
    dconcat, grads["head1_w"], grads["head1_b"] = dense_backward(concat, p["head1_w"], dh1)

    wf = weights.config.wide_flat
    dwide = dconcat[:, :wf].reshape(caches["wide_pool_shape"])
    dlocal = dconcat[:, wf:].reshape(caches["local_out_shape"])

    for i in (2, 1):
        name = f"local{i}"
        a_shape, cols, bn_cache, bn = caches["local"][i - 1]
        dbn = relu_backward(bn, dlocal)
        dconv, grads[f"{name}_gamma"], grads[f"{name}_beta"] = batchnorm_backward(bn_cache, dbn)
        dlocal, grads[f"{name}_w"], grads[f"{name}_b"] = conv2d_backward_cols(
            cols, a_shape, p[f"{name}_w"], dconv, need_dx=i > 1
        )

    dpool = dwide
    for i in (3, 2, 1):
        name = f"wide{i}"
        a_shape, cols, bn_cache, bn, r_shape = caches["wide"][i - 1]
        dr = avgpool2_backward(r_shape, dpool)
        dbn = relu_backward(bn, dr)
        dconv, grads[f"{name}_gamma"], grads[f"{name}_beta"] = batchnorm_backward(bn_cache, dbn)
        dpool, grads[f"{name}_w"], grads[f"{name}_b"] = conv2d_backward_cols(
            cols, a_shape, p[f"{name}_w"], dconv, need_dx=i > 1
        )
    return grads


def forward(weights: ModelWeights, feats: features.FeatureTensor, mode: str = "infer") -> float:
    """Predict received power in dBm for one location."""
    wide_x = feats.wide_input()[None]
    local_x = feats.local_input()[None]
    _check_input_shapes(weights.config, wide_x, local_x)
    if mode not in ("infer", "train"):
        raise ValueError(f"unknown mode {mode!r}")
    # a single sample cannot use batch statistics
    y, _ = _forward(weights, wide_x, local_x, "infer", update_running=False)
    return float(weights.config.denormalize_output(y[0]))


def forward_batch(weights: ModelWeights, wide_x: np.ndarray, local_x: np.ndarray) -> np.ndarray:
    """Infer-mode dBm predictions for a batch of feature stacks."""
    _check_input_shapes(weights.config, wide_x, local_x)
    y, _ = _forward(weights, wide_x, local_x, "infer", update_running=False)
    return weights.config.denormalize_output(y)


def _check_input_shapes(config: ModelConfig, wide_x, local_x):
    w, s = config.window, config.srp_size
    if wide_x.shape[1:] != (3, w, w):
        raise TransferError(
            f"wide input {wide_x.shape[1:]} does not match config (3, {w}, {w})"
        )
    if local_x.shape[1:] != (1, s, s):
        raise TransferError(
            f"local input {local_x.shape[1:]} does not match config (1, {s}, {s})"
        )


def loss_and_grads(
    weights: ModelWeights,
    wide_x: np.ndarray,
    local_x: np.ndarray,
    targets_norm: np.ndarray,
    bn_mode: str = "infer",
) -> tuple[float, dict[str, np.ndarray]]:
    """MSE loss in normalized units and gradients for every parameter."""
    y, caches = _forward(weights, wide_x, local_x, bn_mode, update_running=False)
    loss, dy = mse_loss(y, targets_norm)
    return loss, _backward(weights, caches, dy)


def _mask_srp_center(local_x: np.ndarray) -> np.ndarray:
    """Replace the center SRP pixel by the mean of its neighbours."""
    out = local_x.copy()
    s = out.shape[-1]
    c = s // 2
    if s == 1:
        return out
    total = out.sum(axis=(2, 3))
    center = out[:, :, c, c]
    out[:, :, c, c] = (total - center) / (s * s - 1)
    return out


def _batch_slices(n: int, batch_size: int) -> list[np.ndarray]:
    """Index blocks covering range(n); a trailing single sample is merged
    into the previous block so batch norm always sees at least 2 samples."""
    edges = list(range(0, n, batch_size)) + [n]
    if len(edges) > 2 and edges[-1] - edges[-2] == 1:
        edges.pop(-2)
    return [np.arange(a, b) for a, b in zip(edges[:-1], edges[1:])]


def _eval_loss(weights, wide_x, local_x, targets_norm, batch_size=256) -> float:
    n = len(targets_norm)
    if n == 0:
        return 0.0
    total = 0.0
    for sl in _batch_slices(n, batch_size):
        y, _ = _forward(weights, wide_x[sl], local_x[sl], "infer", update_running=False)
        total += float(((y - targets_norm[sl]) ** 2).sum())
    return total / n


@dataclass
class TrainingCurve:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1


def _group_holdout(groups: np.ndarray, fraction: float, rng) -> np.ndarray:
    """Boolean validation mask covering ~fraction of rows, whole groups."""
    unique = np.unique(groups)
    order = rng.permutation(len(unique))
    target = fraction * len(groups)
    mask = np.zeros(len(groups), dtype=bool)
    taken = 0
    for gi in order:
        if taken >= target:
            break
        sel = groups == unique[gi]
        mask |= sel
        taken += int(sel.sum())
    return mask


def _train_loop(
    weights: ModelWeights,
    dataset,
    *,
    epochs: int,
    batch_size: int,
    learning_rate: float,
    seed: int,
    bn_mode: str,
    val_fraction: float,
    group_validation: bool,
    mask_srp_center: bool,
) -> tuple[ModelWeights, TrainingCurve]:
    n = len(dataset)
    if n == 0:
        raise ValueError("dataset is empty")
    wide_x = dataset.wide
    local_x = _mask_srp_center(dataset.local) if mask_srp_center else dataset.local
    targets = weights.config.normalize_target(dataset.targets)

    split_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 1])))
    val_mask = np.zeros(n, dtype=bool)
    if val_fraction > 0 and n >= 4:
        groups = getattr(dataset, "groups", None)
        if group_validation and groups is not None and len(np.unique(groups)) >= 4:
            val_mask = _group_holdout(np.asarray(groups), val_fraction, split_rng)
        else:
            k = int(round(val_fraction * n))
            val_mask[split_rng.permutation(n)[:k]] = True
    train_ids = np.nonzero(~val_mask)[0]
    val_ids = np.nonzero(val_mask)[0]

    work = weights.copy()
    params = list(work.params.values())
    names = work.param_names()
    state = nadam_init(params, learning_rate=learning_rate)
    shuffle_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 2])))
    curve = TrainingCurve()
    best = work.copy()
    best_val = np.inf
    update_running = bn_mode == "train"

    for epoch in range(epochs):
        perm = train_ids[shuffle_rng.permutation(len(train_ids))]
        epoch_loss = 0.0
        for sl in _batch_slices(len(perm), batch_size):
            ids = perm[sl]
            bw, bl, bt = wide_x[ids], local_x[ids], targets[ids]
            mode = bn_mode if len(ids) >= 2 else "infer"
            y, caches = _forward(work, bw, bl, mode, update_running=update_running and len(ids) >= 2)
            loss, dy = mse_loss(y, bt)
            grads_dict = _backward(work, caches, dy)
            grads = [grads_dict[name] for name in names]
            params, state = nadam_step(params, grads, state)
            work.params = dict(zip(names, params))
            epoch_loss += loss * len(ids)
        curve.train_loss.append(epoch_loss / max(len(perm), 1))
        if len(val_ids) > 0:
            vl = _eval_loss(work, wide_x[val_ids], local_x[val_ids], targets[val_ids])
            curve.val_loss.append(vl)
            if vl < best_val:
                best_val = vl
                best = work.copy()
                curve.best_epoch = epoch
    if len(val_ids) == 0 or epochs == 0:
        best = work.copy()
        curve.best_epoch = epochs - 1
    return best, curve


def pretrain(
    weights: ModelWeights,
    dataset,
    *,
    epochs: int = 300,
    batch_size: int = 64,
    learning_rate: float = 0.002,
    seed: int = 0,
) -> tuple[ModelWeights, TrainingCurve]:
    """Mini-batch Nadam on the simulated dataset; 25% validation holdout.

    Returns the parameter snapshot with the lowest validation loss and the
    per-epoch loss curve.  Deterministic for a given seed.
    """
    return _train_loop(
        weights,
        dataset,
        epochs=epochs,
        batch_size=batch_size,
        learning_rate=learning_rate,
        seed=seed,
        bn_mode="train",
        val_fraction=0.25,
        group_validation=False,
        mask_srp_center=weights.config.mask_srp_center,
    )


def finetune(
    weights: ModelWeights,
    dataset,
    *,
    epochs: int = 300,
    batch_size: int = 64,
    learning_rate: float = 0.0005,
    seed: int = 0,
) -> ModelWeights:
    """Adapt pre-trained weights to measured data.

    All parameters train, but batch-norm running statistics stay frozen
    (fine-tuning batches are tiny).  Datasets smaller than 40 rows skip the
    validation holdout; larger ones hold out 25%, whole source-measurement
    groups at a time when the rows are augmented.
    """
    _check_dataset_shapes(weights.config, dataset)
    val_fraction = 0.25 if len(dataset) >= 40 else 0.0
    best, _ = _train_loop(
        weights,
        dataset,
        epochs=epochs,
        batch_size=batch_size,
        learning_rate=learning_rate,
        seed=seed,
        bn_mode="infer",
        val_fraction=val_fraction,
        group_validation=True,
        mask_srp_center=False,
    )
    return best


def _check_dataset_shapes(config: ModelConfig, dataset):
    w, s = config.window, config.srp_size
    if dataset.wide.shape[1:] != (3, w, w):
        raise TransferError(
            f"layer wide1_w: dataset windows {dataset.wide.shape[1:]} "
            f"do not match config (3, {w}, {w})"
        )
    if dataset.local.shape[1:] != (1, s, s):
        raise TransferError(
            f"layer local1_w: dataset SRP {dataset.local.shape[1:]} "
            f"does not match config (1, {s}, {s})"
        )


def predict_at(
    weights: ModelWeights,
    grid: HeightGrid,
    scenario: Scenario,
    sim_map: RadioMap,
    indices: list[GridIndex],
    batch_size: int = 256,
) -> np.ndarray:
    """Infer-mode dBm predictions at the given available cells.

    Values are clamped to the physically meaningful band 10 dB beyond the
    normalization range.
    """
    cfg = weights.config
    out = np.empty(len(indices))
    for start in range(0, len(indices), batch_size):
        chunk = indices[start : start + batch_size]
        feats = [
            features.make_features(grid, scenario, sim_map, ix, cfg.window, cfg.srp_size)
            for ix in chunk
        ]
        wide = np.stack([f.wide_input() for f in feats])
        local = np.stack([f.local_input() for f in feats])
        out[start : start + len(chunk)] = forward_batch(weights, wide, local)
    return np.clip(out, cfg.p_min - 10.0, cfg.p_max + 10.0)


def predict_map(
    weights: ModelWeights,
    grid: HeightGrid,
    scenario: Scenario,
    sim_map: RadioMap,
    batch_size: int = 256,
) -> RadioMap:
    """Predict every available cell; unavailable cells stay unavailable."""
    indices = sim_map.available_indices()
    values = predict_at(weights, grid, scenario, sim_map, indices, batch_size)
    power = np.full(sim_map.power.shape, np.nan)
    for ix, v in zip(indices, values):
        power[ix.row, ix.col] = v
    return RadioMap(grid, power, sim_map.availability.copy())


# ---------------------------------------------------------------------------
# persistence

_CONFIG_FIELDS = (
    "window", "srp_size", "wide_channels", "wide_kernels", "local_channels",
    "local_kernels", "head_units", "head_linear", "mask_srp_center",
    "d_norm", "h_norm", "p_min", "p_max",
)


def _config_to_json(config: ModelConfig) -> dict:
    out = {}
    for name in _CONFIG_FIELDS:
        v = getattr(config, name)
        out[name] = list(v) if isinstance(v, tuple) else v
    return out


def _config_from_json(data: dict) -> ModelConfig:
    kwargs = {}
    for name in _CONFIG_FIELDS:
        if name not in data:
            raise WeightsFormatError(f"weights header missing config field {name!r}")
        v = data[name]
        kwargs[name] = tuple(v) if isinstance(v, list) else v
    return ModelConfig(**kwargs)


def save_weights(weights: ModelWeights, path) -> None:
    """Binary weights file: magic, version, JSON header, raw float64 data."""
    arrays = [("param", k, v) for k, v in weights.params.items()]
    arrays += [("running", k, v) for k, v in weights.running.items()]
    header = {
        "config": _config_to_json(weights.config),
        "arrays": [
            {"kind": kind, "name": name, "shape": list(a.shape)}
            for kind, name, a in arrays
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<B", WEIGHTS_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_weights(path, expected_config: ModelConfig | None = None) -> ModelWeights:
    """Bit-exact inverse of save_weights.

    Raises WeightsFormatError on a corrupt file and TransferError when the
    stored shapes disagree with the stored (or expected) configuration.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 9 or data[:4] != WEIGHTS_MAGIC:
        raise WeightsFormatError("not a weights file (bad magic)")
    version = data[4]
    if version != WEIGHTS_VERSION:
        raise WeightsFormatError(f"unsupported weights version {version}")
    (header_len,) = struct.unpack("<I", data[5:9])
    if len(data) < 9 + header_len:
        raise WeightsFormatError("truncated weights file (header)")
    try:
        header = json.loads(data[9 : 9 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightsFormatError(f"corrupt weights header: {exc}") from None
    config = _config_from_json(header["config"])
    if expected_config is not None and config != expected_config:
        raise TransferError("weights were saved for a different model configuration")

    template = _param_template(config)
    offset = 9 + header_len
    params: dict[str, np.ndarray] = {}
    running: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if len(data) < offset + nbytes:
            raise WeightsFormatError("truncated weights file (data)")
        a = np.frombuffer(data[offset : offset + nbytes], dtype="<f8").reshape(shape).copy()
        offset += nbytes
        if entry["kind"] == "param":
            expected = template.get(entry["name"])
            if expected is None or expected != shape:
                raise TransferError(
                    f"layer {entry['name']}: stored shape {shape} does not match "
                    f"configuration {expected}"
                )
            params[entry["name"]] = a
        else:
            running[entry["name"]] = a
    missing = set(template) - set(params)
    if missing:
        raise TransferError(f"layer {sorted(missing)[0]}: missing from weights file")
    ordered = {name: params[name] for name in template}
    return ModelWeights(config, ordered, running)
