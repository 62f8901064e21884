"""Reusing a trained network's penultimate activations to regress other indicators."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .nncore import NO_AUGMENT, InputError, SgdConfig, fc, init_network, relu
from .pipeline import R2Report, Regressor, r2_score, train
from .synth import rng_for


@dataclass(frozen=True)
class HeadConfig:
    """Small regression head.  ``layers=1`` is a single linear FC layer on the
    (already rectified) features; ``layers=2`` is FC-ReLU-FC."""

    layers: int = 1
    hidden: int = 32
    sgd: SgdConfig = SgdConfig(lr=0.01, gamma=0.2, momentum=0.8, weight_decay=0.005, batch_size=16)
    epochs: int = 150
    step_epochs: float = 60.0
    seed: int = 0

    def __post_init__(self):
        if self.layers not in (1, 2):
            raise ValueError("head layer count must be 1 or 2")


@dataclass
class Head:
    model: Regressor
    f_mean: np.ndarray
    f_std: np.ndarray

    def predict(self, features) -> np.ndarray:
        z = (np.asarray(features, dtype=float) - self.f_mean) / self.f_std
        return self.model.predict(z)


def extract_features(model: Regressor, tiles) -> np.ndarray:
    """Penultimate activations for a batch of images.

    ``tiles`` is (n, C, H, W) for one tile per item, or (n, 4, C, H, W) for
    four tiles per item, which are averaged per feature.
    """
    tiles = np.asarray(tiles, dtype=np.float32)
    if tiles.ndim == 5:
        if tiles.shape[1] != 4:
            raise InputError(f"tile mode needs 4 tiles per item, got {tiles.shape[1]}")
        n = tiles.shape[0]
        f = model.features(tiles.reshape((n * 4,) + tiles.shape[2:]))
        return f.reshape(n, 4, -1).mean(axis=1)
    if tiles.ndim != 4:
        raise InputError(f"expected (n, C, H, W) or (n, 4, C, H, W) tiles, got shape {tiles.shape}")
    return model.features(tiles)


def fit_head(features, targets, cfg: HeadConfig = HeadConfig()) -> Head:
    x = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if x.ndim != 2 or len(x) != len(y):
        raise InputError("features must be (n, width) and match targets in length")
    if len(x) < 10:
        raise InputError(f"head fitting needs at least 10 samples, got {len(x)}")
    f_mean = x.mean(axis=0)
    f_std = x.std(axis=0)
    f_std[f_std < 1e-12] = 1.0  # constant (dead) features stay zero after centring
    z = (x - f_mean) / f_std
    y_mean = y.mean(axis=0)
    y_std = y.std(axis=0)
    y_std[y_std == 0] = 1.0
    w = x.shape[1]
    if cfg.layers == 1:
        specs = [fc(w, y.shape[1])]
    else:
        specs = [fc(w, cfg.hidden, init_std=np.sqrt(2.0 / w)), relu(), fc(cfg.hidden, y.shape[1])]
    net = init_network(specs, int(rng_for(cfg.seed, "head-init").integers(2 ** 31)), (w,))
    net, _ = train(z, (y - y_mean) / y_std, net, cfg.sgd, NO_AUGMENT, cfg.epochs,
                   seed=int(rng_for(cfg.seed, "head-batches").integers(2 ** 31)), step_epochs=cfg.step_epochs)
    return Head(Regressor(net, 0.0, 1.0, y_mean, y_std), f_mean, f_std)


def kfold(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Seeded partition of range(n) into k near-equal folds."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if n < k:
        raise InputError(f"{n} samples cannot be split into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


@dataclass
class CrossvalReport:
    folds: list
    fold_reports: list  # R2Report per fold, None for folds too small to score
    pooled: R2Report  # all out-of-fold predictions scored together
    predictions: np.ndarray = field(repr=False, default=None)

    @property
    def fold_scores(self) -> list:
        return [r.overall if r is not None else None for r in self.fold_reports]

    @property
    def mean(self) -> float:
        s = [v for v in self.fold_scores if v is not None]
        return float(np.mean(s)) if s else self.pooled.overall

    @property
    def best(self) -> float:
        s = [v for v in self.fold_scores if v is not None]
        return float(np.max(s)) if s else self.pooled.overall

    def to_dict(self) -> dict:
        return {"folds": [f.tolist() for f in self.folds], "fold_r2": self.fold_scores,
                "mean_r2": self.mean, "best_fold_r2": self.best, "pooled": self.pooled.to_dict()}


def crossval(features, targets, k=5, cfg: HeadConfig = HeadConfig(), seed=None, names=()) -> CrossvalReport:
    """Train on k-1 folds, score the held-out fold; k = len(features) gives leave-one-out."""
    x = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    seed = cfg.seed if seed is None else seed
    folds = kfold(len(x), k, seed)
    pred = np.empty_like(y)
    reports = []
    for i, test in enumerate(folds):
        tr = np.setdiff1d(np.arange(len(x)), test)
        head = fit_head(x[tr], y[tr], replace(cfg, seed=int(rng_for(seed, f"fold{i}").integers(2 ** 31))))
        pred[test] = head.predict(x[test])
        reports.append(r2_score(pred[test], y[test], names) if len(test) >= 2 else None)
    return CrossvalReport(folds, reports, r2_score(pred, y, names), pred)


@dataclass(frozen=True)
class DistrictRecord:
    district_id: str
    members: tuple
    prediction: np.ndarray
    targets: Mapping = field(default_factory=dict)


def aggregate_district(village_ids: Sequence[str], predictions, mapping: Mapping[str, str],
                       targets: Mapping[str, Mapping[str, float]] | None = None) -> list[DistrictRecord]:
    """Arithmetic mean of village predictions per district, sorted by district id."""
    pred = np.asarray(predictions, dtype=float)
    groups: dict[str, list[int]] = {}
    for i, vid in enumerate(village_ids):
        if vid not in mapping:
            raise InputError(f"village {vid} has no district")
        groups.setdefault(mapping[vid], []).append(i)
    out = []
    for d in sorted(groups):
        idx = groups[d]
        tv = {name: col[d] for name, col in (targets or {}).items() if d in col}
        out.append(DistrictRecord(d, tuple(village_ids[i] for i in idx), pred[idx].mean(axis=0), tv))
    return out


def district_matrix(records: Sequence[DistrictRecord], indicators: Sequence[str]):
    """(features, targets) arrays from district records for the named indicators."""
    x = np.array([r.prediction for r in records])
    y = np.array([[r.targets[name] for name in indicators] for r in records])
    return x, y


@dataclass
class SweepResult:
    names: list
    r2: list  # mean cross-validated R^2 per indicator
    best: list
    bins: np.ndarray
    counts: np.ndarray

    def histogram(self) -> dict:
        return {"bins": self.bins.tolist(), "counts": self.counts.tolist(), "n": int(self.counts.sum())}


def indicator_sweep(features, table: Mapping[str, Sequence[float]], k=5, cfg: HeadConfig = HeadConfig(),
                    bins=None) -> SweepResult:
    """Cross-validate one head per indicator column and histogram the scores."""
    x = np.asarray(features, dtype=float)
    names, scores, best = [], [], []
    for name, col in table.items():
        y = np.asarray(col, dtype=float)
        if len(y) != len(x) or not np.all(np.isfinite(y)):
            raise InputError(f"indicator {name} incomplete over districts")
        rep = crossval(x, y, k, cfg)
        names.append(name)
        scores.append(rep.mean)
        best.append(rep.best)
    if bins is None:
        bins = np.linspace(-1.0, 1.0, 21)
    clipped = np.clip(scores, bins[0], bins[-1])
    counts, edges = np.histogram(clipped, bins=bins)
    return SweepResult(names, scores, best, edges, counts)


def write_sweep(result: SweepResult, csv_path, json_path) -> None:
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["indicator", "mean_r2", "best_fold_r2"])
        for n, s, b in zip(result.names, result.r2, result.best):
            w.writerow([n, repr(float(s)), repr(float(b))])
    with open(json_path, "w") as fh:
        json.dump(result.histogram(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_district_mapping(path) -> dict:
    with open(path, newline="") as fh:
        return {r["village_id"]: r["district_id"] for r in csv.DictReader(fh)}


def read_indicator_table(path) -> tuple[list, dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    ids = [r["district_id"] for r in rows]
    names = [k for k in rows[0] if k != "district_id"] if rows else []
    return ids, {n: {r["district_id"]: float(r[n]) for r in rows} for n in names}
