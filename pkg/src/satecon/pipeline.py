"""Training flows: night-light and direct asset regression, evaluation, placebo check."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .census import INDICATORS, MAHALANOBIS_THRESHOLD, N_INDICATORS, aggregate_all, mahalanobis_filter
from .nncore import (NO_AUGMENT, AugmentSpec, InputError, LayerSpec, Network, NumericError, SgdConfig, augment,
                     backward, euclidean_loss, forward, init_network, micro_net, network_from_dict,
                     network_to_dict, penultimate_index, sgd_step)
from .synth import NightCell, World, rng_for

log = logging.getLogger(__name__)


class UnreachableTarget(RuntimeError):
    def __init__(self, message, achieved):
        super().__init__(message)
        self.achieved = achieved


# -- statistics --------------------------------------------------------------

def skewness(values) -> float:
    """Population skewness m3 / m2^1.5."""
    x = np.asarray(values, dtype=float)
    if x.size < 3:
        raise ValueError("skewness needs at least 3 values")
    c = x - x.mean()
    m2 = np.mean(c * c)
    if m2 <= 1e-300:
        raise ValueError("skewness undefined for zero variance")
    return float(np.mean(c ** 3) / m2 ** 1.5)


def undersample_skew(cells: Sequence[NightCell], target_skew: float, seed: int) -> list[NightCell]:
    """Drop a seeded random subset of modal-intensity cells until skewness <= target.

    Only cells at the modal (most frequent, lowest on ties) intensity are
    candidates.  Every candidate carries the same value, so the skewness after
    removing k of them depends on k alone; all k are scored exactly from
    moments about the mode and the smallest k reaching the target is used.
    The seed only decides which modal cells go.
    """
    cells = list(cells)
    vals = np.array([c.intensity for c in cells], dtype=float)
    if skewness(vals) <= target_skew:
        return cells
    levels, counts = np.unique(vals, return_counts=True)
    mode = levels[np.argmax(counts)]
    modal = np.flatnonzero(vals == mode)
    order = np.random.default_rng(seed).permutation(modal)

    # removed cells sit at 0 about the mode, so the raw sums stay fixed and only n shrinks
    d = vals - mode
    s1, s2, s3 = d.sum(), (d * d).sum(), (d ** 3).sum()
    n = len(vals) - np.arange(len(order) + 1, dtype=float)
    mean = s1 / n
    m2 = s2 / n - mean ** 2
    m3 = s3 / n - 3 * mean * s2 / n + 2 * mean ** 3
    with np.errstate(divide="ignore", invalid="ignore"):
        skews = np.where((n >= 3) & (m2 > 1e-12 * max(s2, 1.0) / n), m3 / np.abs(m2) ** 1.5, np.inf)
    hits = np.flatnonzero(skews <= target_skew)
    if hits.size == 0:
        raise UnreachableTarget(f"removing modal cells cannot reach skew {target_skew}", float(skews.min()))
    for k in hits:
        keep = np.ones(len(cells), dtype=bool)
        keep[order[:k]] = False
        if skewness(vals[keep]) <= target_skew:  # guards rounding right at the threshold
            return [c for c, m in zip(cells, keep) if m]
    raise UnreachableTarget(f"removing modal cells cannot reach skew {target_skew}", float(skews.min()))


@dataclass(frozen=True)
class R2Report:
    per_indicator: tuple  # float or None where target variance is zero
    overall: float
    n: int
    names: tuple = ()

    def to_dict(self) -> dict:
        return {"per_indicator": list(self.per_indicator), "overall": self.overall, "n": self.n,
                "names": list(self.names)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def r2_score(pred, actual, names=()) -> R2Report:
    """Per-column R^2 and their target-variance-weighted mean."""
    pred = np.asarray(pred, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if pred.ndim == 1:
        pred, actual = pred[:, None], actual[:, None]
    if pred.shape != actual.shape:
        raise InputError(f"prediction shape {pred.shape} != actual shape {actual.shape}")
    if actual.shape[0] < 2:
        raise ValueError("R^2 needs at least 2 samples")
    mean = actual.mean(axis=0)
    ss_tot = np.sum((actual - mean) ** 2, axis=0)
    ss_res = np.sum((actual - pred) ** 2, axis=0)
    tiny = 1e-12 * np.maximum(np.sum(actual ** 2, axis=0), 1e-300)
    per = []
    num = den = 0.0
    for j in range(actual.shape[1]):
        if ss_tot[j] <= tiny[j]:
            per.append(None)
            continue
        r2 = 1.0 - ss_res[j] / ss_tot[j]
        per.append(float(r2))
        num += ss_tot[j] * r2
        den += ss_tot[j]
    overall = float(num / den) if den > 0 else float("nan")
    return R2Report(tuple(per), overall, int(actual.shape[0]), tuple(names))


# -- datasets ----------------------------------------------------------------

@dataclass
class Dataset:
    x: np.ndarray  # (n, c, h, w)
    y: np.ndarray  # (n, k)
    ids: list = field(default_factory=list)
    train_idx: np.ndarray | None = None
    test_idx: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise InputError("images and targets differ in length")
        if self.y.ndim == 1:
            self.y = self.y[:, None]
        if not self.ids:
            self.ids = [str(i) for i in range(len(self.x))]

    def __len__(self):
        return len(self.x)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.x[idx], self.y[idx], [self.ids[i] for i in idx], seed=self.seed)

    @property
    def train(self) -> "Dataset":
        return self.subset(self.train_idx)

    @property
    def test(self) -> "Dataset":
        return self.subset(self.test_idx)


def split(dataset: Dataset, fractions=(8, 2), seed=0) -> Dataset:
    """Seeded shuffle, then a contiguous train/test cut (default 8:2)."""
    a, b = fractions
    if a <= 0 or b <= 0:
        raise ValueError("split fractions must be positive")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    cut = int(round(n * a / (a + b)))
    return replace(dataset, train_idx=np.sort(perm[:cut]), test_idx=np.sort(perm[cut:]), seed=seed)


# -- training ----------------------------------------------------------------

@dataclass
class Regressor:
    """Network plus the input/target standardisation it was trained under."""

    net: Network
    x_mean: float = 0.0
    x_std: float = 1.0
    y_mean: np.ndarray = field(default_factory=lambda: np.zeros(1))
    y_std: np.ndarray = field(default_factory=lambda: np.ones(1))

    def prepare(self, x) -> np.ndarray:
        return ((np.asarray(x, dtype=np.float32) - self.x_mean) / self.x_std).astype(self.net.dtype)

    def predict(self, x, batch=256) -> np.ndarray:
        out = [forward(self.net, self.prepare(x[i:i + batch])) for i in range(0, len(x), batch)]
        out = np.concatenate(out) if out else np.zeros((0,) + self.net.output_shape)
        return out.astype(np.float64) * self.y_std + self.y_mean

    def features(self, x, batch=256) -> np.ndarray:
        k = penultimate_index(self.net)
        out = [forward(self.net, self.prepare(x[i:i + batch]), upto=k) for i in range(0, len(x), batch)]
        return np.concatenate(out).reshape(len(x), -1).astype(np.float64)


def train(x, y, net: Network, config: SgdConfig, aug: AugmentSpec = NO_AUGMENT, epochs=10, seed=0,
          step_epochs=2.0):
    """Minibatch momentum SGD on the Euclidean loss; returns (network, mean loss per epoch).

    The LR step interval is ``config.step_interval`` iterations when set,
    otherwise ``step_epochs`` epochs.
    """
    x = np.asarray(x)
    y = np.asarray(y, dtype=net.dtype)
    if len(x) == 0:
        raise InputError("empty training set")
    if y.reshape(len(y), -1).shape[1] != int(np.prod(net.output_shape)):
        raise InputError(f"target width {y.shape[1:]} does not match network output {net.output_shape}")
    y = y.reshape((len(y),) + net.output_shape)
    n = len(x)
    bs = config.batch_size
    per_epoch = math.ceil(n / bs)
    interval = config.step_interval or max(1, int(round(step_epochs * per_epoch)))
    rng = np.random.default_rng(seed)
    drop_rng = np.random.default_rng([seed, 1])
    if x.shape[-1] != x.shape[-2]:
        # quarter turns would change the extent of non-square inputs
        aug = replace(aug, rotations=tuple(r for r in aug.rotations if r in (0, 180)) or (0,))
    use_aug = aug.hflip or aug.vflip or aug.rotations != (0,)
    curve = []
    it = 0
    draw = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for b in range(per_epoch):
            idx = order[b * bs:(b + 1) * bs]
            xb = x[idx]
            if use_aug:
                xb = np.stack([augment(img, aug, draw + j) for j, img in enumerate(xb)])
                draw += len(idx)
            xb = xb.astype(net.dtype, copy=False)
            out, cache = forward(net, xb, training=True, rng=drop_rng, return_cache=True)
            loss, g = euclidean_loss(out, y[idx])
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at iteration {it}", iteration=it)
            grads = backward(net, cache, g)
            net = sgd_step(net, grads, config, it, interval)
            total += loss * len(idx)
            it += 1
        curve.append(total / n)
    return net, curve


@dataclass(frozen=True)
class TrainConfig:
    """Everything a desk-scale training run needs besides data and seed.

    A full-scale learning rate of 1e-6 is useless on a 64x64 micro-net with
    standardised targets; 2e-3 with a slower LR step (every 8 epochs) is what
    converges here.  Momentum, gamma, weight decay and batch size are kept.
    """

    sgd: SgdConfig = SgdConfig(lr=0.002, gamma=0.2, momentum=0.8, weight_decay=0.005, batch_size=32)
    epochs: int = 24
    step_epochs: float = 8.0
    augment: AugmentSpec = AugmentSpec(seed=0)
    width: tuple = (8, 16, 16)
    features: int = 128
    dropout: float = 0.0

    def specs(self, input_shape, outputs) -> list[LayerSpec]:
        return micro_net(tuple(input_shape), outputs, self.width, self.features, self.dropout)


DESK = TrainConfig()
# a single standardised output sees ~16x less gradient than the asset vector; it needs a hotter step
NIGHT = replace(DESK, sgd=replace(DESK.sgd, lr=0.02))


def fit_regressor(x, y, cfg: TrainConfig = DESK, seed=0, specs=None, dtype=np.float32):
    """Standardise images and targets on the training set, then train; returns (Regressor, curve)."""
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    x_mean = float(x.mean())
    x_std = float(x.std()) or 1.0
    y_mean = y.mean(axis=0)
    y_std = y.std(axis=0)
    y_std[y_std == 0] = 1.0
    if specs is None:
        specs = cfg.specs(x.shape[1:], y.shape[1])
    net = init_network(specs, int(rng_for(seed, "init").integers(2 ** 31)), x.shape[1:], dtype=dtype)
    model = Regressor(net, x_mean, x_std, y_mean, y_std)
    aug = replace(cfg.augment, seed=int(rng_for(seed, "augment").integers(2 ** 31)))
    trained, curve = train(model.prepare(x), (y - y_mean) / y_std, net, cfg.sgd, aug, cfg.epochs,
                           seed=int(rng_for(seed, "batches").integers(2 ** 31)), step_epochs=cfg.step_epochs)
    model.net = trained
    return model, curve


def untrained_regressor(x, outputs, cfg: TrainConfig = DESK, seed=0, dtype=np.float32) -> Regressor:
    """Freshly initialised network with the same input standardisation a trained one would get."""
    return fit_regressor(x, np.zeros((len(x), outputs)), replace(cfg, epochs=0), seed, dtype=dtype)[0]


def evaluate(model: Regressor, x, y, names=()) -> R2Report:
    return r2_score(model.predict(x), y, names)


def row_losses(pred, target) -> np.ndarray:
    """Per-row 0.5 * ||pred - target||^2 (the summand of the Euclidean loss)."""
    d = np.asarray(pred) - np.asarray(target)
    return 0.5 * np.sum(d * d, axis=1)


def placebo_check(dataset: Dataset, cfg: TrainConfig = DESK, seed=0, permutation=None) -> R2Report:
    """Shuffle targets against images, train on the train split, score on the test split."""
    if dataset.train_idx is None:
        dataset = split(dataset, seed=seed)
    n = len(dataset)
    perm = np.random.default_rng([seed, 7]).permutation(n) if permutation is None else np.asarray(permutation)
    shuffled = replace(dataset, y=dataset.y[perm])
    tr, te = shuffled.train, shuffled.test
    model, _ = fit_regressor(tr.x, tr.y, cfg, seed)
    return evaluate(model, te.x, te.y, INDICATORS if te.y.shape[1] == N_INDICATORS else ())


# -- end-to-end flows on a synthetic world -----------------------------------

def world_dataset(world: World, reject_outliers=False, mosaic=False, seed=None,
                  threshold=MAHALANOBIS_THRESHOLD) -> tuple[Dataset, np.ndarray]:
    """Direct-regression dataset of images -> observed asset vectors; returns (dataset, kept mask)."""
    assets = aggregate_all(world.census)
    keep = np.ones(world.n, dtype=bool)
    if reject_outliers:
        keep = mahalanobis_filter(assets, threshold, world.village_ids).kept
    x = world.mosaic() if mosaic else world.image_float()
    ds = Dataset(x, assets, list(world.village_ids))
    return split(ds, seed=world.config.seed if seed is None else seed), keep


@dataclass
class DirectRun:
    model: Regressor
    dataset: Dataset
    keep: np.ndarray
    curve: list

    def test_report(self, rows=None) -> R2Report:
        idx = self.dataset.test_idx if rows is None else rows
        return evaluate(self.model, self.dataset.x[idx], self.dataset.y[idx], INDICATORS)


def train_direct(world: World, reject_outliers=False, cfg: TrainConfig = DESK, seed=None) -> DirectRun:
    """Fit the asset regressor on the train split, minus Mahalanobis-rejected rows when asked."""
    seed = world.config.seed if seed is None else seed
    ds, keep = world_dataset(world, reject_outliers, seed=seed)
    tr = ds.train_idx[keep[ds.train_idx]]
    model, curve = fit_regressor(ds.x[tr], ds.y[tr], cfg, seed)
    return DirectRun(model, ds, keep, curve)


def train_nightlight(world: World, cells: Sequence[NightCell] | None = None, mosaic=False,
                     cfg: TrainConfig = NIGHT, seed=None):
    """Scalar night-intensity regressor, scored on the held-out 20%; returns (model, report, curve)."""
    seed = world.config.seed if seed is None else seed
    cells = world.night if cells is None else list(cells)
    index = {c.cell_id: i for i, c in enumerate(world.night)}
    idx = np.array([index[c.cell_id] for c in cells])
    x = world.mosaic(idx) if mosaic else world.image_float(idx)
    y = np.array([c.intensity for c in cells], dtype=float)[:, None]
    ds = split(Dataset(x, y, [c.cell_id for c in cells]), seed=seed)
    tr, te = ds.train, ds.test
    model, curve = fit_regressor(tr.x, tr.y, cfg, seed)
    return model, evaluate(model, te.x, te.y, ("night",)), curve


CONTEXT_SIZES = (32, 48, 56, 64)  # stand-ins for the 1 / 2.5 / 4 / 7 km^2 input areas


def crop_context(images, size: int) -> np.ndarray:
    """Centre crop of the last two axes to ``size`` x ``size`` (the village sits near the centre)."""
    images = np.asarray(images)
    h, w = images.shape[-2:]
    if size > min(h, w) or size < 1:
        raise InputError(f"cannot crop {h}x{w} images to {size}")
    top, left = (h - size) // 2, (w - size) // 2
    return np.ascontiguousarray(images[..., top:top + size, left:left + size])


def predict_village(model, tiles, mode="single") -> np.ndarray:
    """Prediction for one village from 1 tile ("single") or 4 tiles averaged ("tile-average")."""
    tiles = np.asarray(tiles, dtype=np.float32)
    expected = {"single": 1, "tile-average": 4}
    if mode not in expected:
        raise ValueError(f"unknown mode {mode!r}")
    if tiles.shape[0] != expected[mode]:
        raise InputError(f"{mode} mode needs {expected[mode]} tile(s), got {tiles.shape[0]}")
    return model.predict(tiles).mean(axis=0)


def regressor_to_dict(model: Regressor) -> dict:
    return {"network": network_to_dict(model.net), "x_mean": float(model.x_mean), "x_std": float(model.x_std),
            "y_mean": np.asarray(model.y_mean, dtype=float).tolist(),
            "y_std": np.asarray(model.y_std, dtype=float).tolist()}


def regressor_from_dict(obj: dict) -> Regressor:
    return Regressor(network_from_dict(obj["network"]), obj["x_mean"], obj["x_std"],
                     np.array(obj["y_mean"]), np.array(obj["y_std"]))


def save_regressor(model: Regressor, path) -> None:
    Path(path).write_text(json.dumps(regressor_to_dict(model), sort_keys=True) + "\n")


def load_regressor(path) -> Regressor:
    return regressor_from_dict(json.loads(Path(path).read_text()))
