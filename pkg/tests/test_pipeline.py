from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from satecon.nncore import SgdConfig, fc, init_network
from satecon.pipeline import (DESK, Dataset, UnreachableTarget, crop_context, fit_regressor, load_regressor,
                              placebo_check, predict_village, r2_score, save_regressor, skewness, split, train,
                              train_nightlight, undersample_skew)
from satecon.synth import NightCell, SynthConfig, synth_generate

from oracles import moment_skewness


def _cells(values):
    return [NightCell(f"c{i:05d}", int(v), "img") for i, v in enumerate(values)]


def test_skewness_examples():
    assert skewness([-1, 0, 1]) == 0.0
    assert skewness([0, 0, 0, 1]) == pytest.approx(2 / np.sqrt(3), abs=1e-12)
    with pytest.raises(ValueError):
        skewness([2, 2, 2])


@given(hnp.arrays(np.float64, st.integers(3, 40), elements=st.integers(-1000, 1000).map(float)))
def test_skewness_matches_oracle_and_is_odd(x):
    if np.ptp(x) == 0:
        return
    assert skewness(x) == pytest.approx(moment_skewness(x), rel=1e-9, abs=1e-9)
    assert skewness(-x) == pytest.approx(-skewness(x), rel=1e-9, abs=1e-12)


def _zero_heavy(n=3000, zeros=0.9, seed=0):
    rng = np.random.default_rng(seed)
    return np.where(rng.random(n) < zeros, 0, np.clip(np.round(rng.normal(30, 8, n)), 1, 63)).astype(int)


def test_undersample_reaches_target_deterministically():
    vals = _zero_heavy()
    cells = _cells(vals)
    assert skewness(vals) > 3
    a = undersample_skew(cells, 0.4, seed=3)
    b = undersample_skew(cells, 0.4, seed=3)
    assert [c.cell_id for c in a] == [c.cell_id for c in b]
    assert skewness([c.intensity for c in a]) <= 0.4
    # only modal (zero) cells are ever removed
    removed = {c.cell_id for c in cells} - {c.cell_id for c in a}
    assert all(cells[int(r[1:])].intensity == 0 for r in removed)
    assert sum(c.intensity > 0 for c in a) == int(np.sum(vals > 0))


def test_undersample_minimal_removal():
    cells = _cells(_zero_heavy(seed=1))
    out = undersample_skew(cells, 0.4, seed=0)
    order = np.random.default_rng(0).permutation([i for i, c in enumerate(cells) if c.intensity == 0])
    k = len(cells) - len(out)
    keep = np.ones(len(cells), bool)
    keep[order[:k - 1]] = False
    assert skewness([c.intensity for c, m in zip(cells, keep) if m]) > 0.4


@given(st.lists(st.integers(0, 12), min_size=4, max_size=40), st.floats(-1.0, 1.0), st.integers(0, 99))
def test_undersample_matches_brute_force(vals, target, seed):
    vals = np.array(vals)
    if np.ptp(vals) == 0:
        return
    cells = _cells(vals)
    if skewness(vals) <= target:
        assert undersample_skew(cells, target, seed) == cells
        return
    levels, counts = np.unique(vals, return_counts=True)
    mode = levels[np.argmax(counts)]
    rest = vals[vals != mode]
    feasible = []
    for k in range(counts.max() + 1):
        v = np.concatenate([rest, np.full(counts.max() - k, mode)])
        if v.size >= 3 and np.ptp(v) > 0 and skewness(v) <= target:
            feasible.append(k)
    if not feasible:
        with pytest.raises(UnreachableTarget):
            undersample_skew(cells, target, seed)
        return
    out = undersample_skew(cells, target, seed)
    assert len(cells) - len(out) == feasible[0]


def test_undersample_already_at_target():
    cells = _cells([1, 2, 3, 4, 5, 6])
    assert undersample_skew(cells, 0.4, 0) == cells


def test_undersample_unreachable_reports_skew():
    rng = np.random.default_rng(0)
    vals = np.where(rng.random(2000) < 0.5, 0, np.clip(np.round(rng.exponential(6, 2000) ** 1.4) + 1, 1, 63))
    with pytest.raises(UnreachableTarget) as exc:
        undersample_skew(_cells(vals), 0.4, 0)
    assert exc.value.achieved > 0.4


def test_r2_examples():
    y = np.array([[1.0], [2.0], [3.0]])
    assert r2_score(y, y).per_indicator == (1.0,)
    assert r2_score(np.full_like(y, 2.0), y).overall == 0.0
    assert r2_score(np.array([1.0, 2.0, 4.0]), np.array([1.0, 2.0, 3.0])).overall == pytest.approx(0.5)


def test_r2_weighting_and_undefined():
    rng = np.random.default_rng(0)
    y = np.column_stack([rng.normal(0, 1, 50), rng.normal(0, 3, 50), np.full(50, 7.0)])
    p = y + rng.normal(0, 1, y.shape)
    rep = r2_score(p, y)
    assert rep.per_indicator[2] is None
    var = y[:, :2].var(axis=0)
    r = np.array(rep.per_indicator[:2])
    assert rep.overall == pytest.approx(float(var @ r / var.sum()), rel=1e-12)


@given(st.integers(0, 10 ** 6), st.floats(-50, 50))
def test_constant_predictor_never_positive(seed, c):
    y = np.random.default_rng(seed).normal(size=(20, 3))
    assert r2_score(np.full_like(y, c), y).overall <= 1e-12


@given(st.integers(2, 300), st.integers(0, 10 ** 6))
def test_split_properties(n, seed):
    ds = Dataset(np.zeros((n, 1, 2, 2)), np.zeros((n, 1)))
    s = split(ds, seed=seed)
    both = np.concatenate([s.train_idx, s.test_idx])
    assert sorted(both.tolist()) == list(range(n))
    assert abs(len(s.train_idx) - 0.8 * n) <= 1
    assert np.array_equal(split(ds, seed=seed).test_idx, s.test_idx)


def _linear_task(n=200, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 5))
    y = x @ rng.normal(size=(5, 2))
    return x, y


def test_train_zero_epochs_is_identity():
    x, y = _linear_task()
    net = init_network([fc(5, 2)], 0, (5,))
    out, curve = train(x, y, net, SgdConfig(lr=0.01), epochs=0)
    assert curve == [] and np.array_equal(out.weights[0], net.weights[0])


def test_train_reduces_loss_and_is_deterministic():
    x, y = _linear_task()
    net = init_network([fc(5, 2)], 0, (5,))
    cfg = SgdConfig(lr=0.05, weight_decay=0.0, batch_size=16)
    _, c1 = train(x, y, net, cfg, epochs=20, seed=1)
    _, c2 = train(x, y, net, cfg, epochs=20, seed=1)
    assert c1 == c2
    assert c1[-1] < 0.1 * c1[0]


def test_regressor_roundtrip(tmp_path):
    x = np.random.default_rng(0).random((40, 1, 16, 16)).astype(np.float32)
    y = x.mean(axis=(1, 2, 3))[:, None] * np.array([1.0, -2.0])
    cfg = replace(DESK, epochs=1, width=(4, 4, 4), features=8)
    model, _ = fit_regressor(x, y, cfg, seed=0)
    save_regressor(model, tmp_path / "m.json")
    back = load_regressor(tmp_path / "m.json")
    assert np.array_equal(back.predict(x), model.predict(x))


def test_predict_village_modes():
    x = np.random.default_rng(0).random((4, 1, 16, 16)).astype(np.float32)
    cfg = replace(DESK, epochs=0, width=(4, 4, 4), features=8)
    model, _ = fit_regressor(x, np.random.default_rng(1).normal(size=(4, 3)), cfg)
    one = predict_village(model, x[:1])
    same = predict_village(model, np.repeat(x[:1], 4, axis=0), "tile-average")
    assert np.allclose(one, same)
    a = predict_village(model, x, "tile-average")
    assert np.allclose(a, predict_village(model, x[::-1], "tile-average"))
    assert np.allclose(a, model.predict(x).mean(axis=0))
    with pytest.raises(ValueError):
        predict_village(model, x[:2], "tile-average")


def test_crop_context():
    img = np.arange(64 * 64).reshape(1, 1, 64, 64)
    c = crop_context(img, 32)
    assert c.shape == (1, 1, 32, 32) and c[0, 0, 0, 0] == img[0, 0, 16, 16]
    with pytest.raises(ValueError):
        crop_context(img, 80)


def test_placebo_identity_permutation_equals_training():
    world = synth_generate(SynthConfig(villages=120, image_size=32, seed=4))
    from satecon.census import aggregate_all

    ds = split(Dataset(world.image_float(), aggregate_all(world.census)), seed=0)
    cfg = replace(DESK, epochs=2, width=(4, 4, 4), features=16)
    rep = placebo_check(ds, cfg, seed=0, permutation=np.arange(len(ds)))
    model, _ = fit_regressor(ds.train.x, ds.train.y, cfg, 0)
    direct = r2_score(model.predict(ds.test.x), ds.test.y)
    assert rep.per_indicator == direct.per_indicator


def test_nightlight_zero_epoch_baseline():
    world = synth_generate(SynthConfig(villages=200, seed=2))
    cfg = replace(DESK, epochs=0)
    _, rep, _ = train_nightlight(world, cfg=cfg)
    assert rep.overall <= 0


@pytest.mark.slow
def test_nightlight_recovers_planted_luminance():
    world = synth_generate(SynthConfig(villages=1000, relation="monotone", noise=0.1, seed=21))
    _, rep, _ = train_nightlight(world)
    assert rep.overall >= 0.7


@pytest.mark.slow
def test_mosaic_context_helps_when_light_spreads():
    world = synth_generate(SynthConfig(villages=1000, noise=0.1, light_spread=1.0, seed=22))
    _, single, _ = train_nightlight(world)
    _, mosaic, _ = train_nightlight(world, mosaic=True)
    assert mosaic.overall >= single.overall
