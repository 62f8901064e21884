"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

The lines are printed in the terminal summary (see conftest.py) so a plain
``pytest tests/test_acceptance.py`` shows the whole scoreboard.
"""

import functools
import json
import time
from pathlib import Path

import numpy as np
import pytest

from satecon.census import INDICATORS, aggregate_all, aggregate_assets, CensusRow, mahalanobis_filter
from satecon.cli import main as cli_main
from satecon.econ import STANDARD_SPECS, VILLAGE_SPEC, ols_fit, repeated_sampling, run_specs, synth_records
from satecon.nncore import grad_check, init_network, micro_net
from satecon.pipeline import (DESK, Dataset, UnreachableTarget, placebo_check, row_losses, skewness, split,
                              train_direct, undersample_skew, untrained_regressor)
from satecon.spatial import (GeoGrid, detect_edges, gradient_magnitude, mean_pixel_net, net_predictor,
                             occlusion_heatmap)
from satecon.synth import NightCell, SynthConfig, synth_generate
from satecon.transfer import HeadConfig, aggregate_district, crossval, district_matrix, extract_features

from golden_rows import golden_rows
from oracles import binomial_interval, central_differences, mahalanobis_brute, ols_normal_equations

GOLDEN = json.loads((Path(__file__).parent / "data" / "asset_golden.json").read_text())
RESULTS = []


def criterion(number, title):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                detail = fn(*args, **kwargs)
            except BaseException as exc:
                msg = " ".join(str(exc).split())[:160]
                RESULTS.append(f"criterion {number:>2} {title}: FAIL ({type(exc).__name__}: {msg})")
                raise
            took = time.perf_counter() - t0
            RESULTS.append(f"criterion {number:>2} {title}: PASS ({detail}; {took:.1f}s)")
        return run
    return wrap


@criterion(1, "gradient integrity")
def test_gradient_integrity():
    t0 = time.perf_counter()
    errs = []
    for k in range(20):
        rng = np.random.default_rng([2024, k])
        c, s = int(rng.integers(1, 4)), int(rng.integers(17, 33))
        width = tuple(int(v) for v in rng.integers(3, 7, 3))
        outs, feats = int(rng.integers(1, 6)), int(rng.integers(4, 13))
        net = init_network(micro_net((c, s, s), outs, width, feats), int(rng.integers(2 ** 31)), (c, s, s))
        # zero biases put dead units exactly on the ReLU kink; check at a generic point instead
        for i in net.param_layers():
            net.biases[i][:] = rng.normal(0.0, 0.1, net.biases[i].shape)
        n = int(rng.integers(2, 5))
        errs.append(grad_check(net, rng.normal(size=(n, c, s, s)), rng.normal(size=(n, outs)), epsilon=1e-5, seed=k))
    took = time.perf_counter() - t0
    assert max(errs) < 1e-4, f"max relative error {max(errs):.3g}"
    assert took < 60
    return f"max rel err {max(errs):.2e} over 20 nets"


@pytest.fixture(scope="module")
def world_2000():
    world = synth_generate(SynthConfig(villages=2000, relation="monotone", noise=0.1, seed=1))
    return world


@criterion(2, "planted-signal recovery")
def test_planted_signal_recovery(world_2000):
    t0 = time.perf_counter()
    run = train_direct(world_2000, cfg=DESK)
    rep = run.test_report()
    assert time.perf_counter() - t0 < 600
    assert rep.overall >= 0.8, f"R2 {rep.overall:.3f}"
    return f"held-out R2 {rep.overall:.3f}"


@criterion(3, "placebo null")
def test_placebo_null(world_2000):
    ds = split(Dataset(world_2000.image_float(), aggregate_all(world_2000.census)), seed=1)
    rep = placebo_check(ds, DESK, seed=1)
    worst = max(r for r in rep.per_indicator if r is not None)
    assert worst <= 0.1, f"max per-indicator R2 {worst:.3f}"
    return f"max per-indicator R2 {worst:.3f}"


@criterion(4, "outlier-rejection benefit")
def test_outlier_rejection_benefit():
    wins = 0
    for s in range(10):
        world = synth_generate(SynthConfig(villages=600, relation="monotone", noise=0.1, outlier_fraction=0.05,
                                           seed=100 + s))
        off = train_direct(world, reject_outliers=False)
        on = train_direct(world, reject_outliers=True)
        test = off.dataset.test_idx
        clean = test[~world.outliers[test]]
        y = off.dataset.y
        loss_on = row_losses(on.model.predict(off.dataset.x[clean]), y[clean]).mean()
        loss_off = row_losses(off.model.predict(off.dataset.x[clean]), y[clean]).mean()
        every = row_losses(off.model.predict(off.dataset.x), y)
        ordered = every[world.outliers].mean() > every[~world.outliers].mean()
        wins += bool(loss_on < loss_off and ordered)
    assert wins >= 9, f"{wins}/10 trials"
    return f"{wins}/10 trials"


@criterion(5, "Mahalanobis correctness")
def test_mahalanobis_correctness():
    rng = np.random.default_rng(5)
    clean = rng.normal(size=(20000, 16))
    frac = mahalanobis_filter(clean).rejection_fraction
    x = rng.normal(size=(2000, 16))
    x[:100] += 100.0 * rng.choice([-1.0, 1.0], size=(100, 16))
    rep = mahalanobis_filter(x)
    caught = rep.rejected[:100].mean()
    err = np.max(np.abs(rep.distances - mahalanobis_brute(x, rep.location, rep.covariance)))
    assert frac < 0.001 and caught == 1.0 and err < 1e-8
    return f"clean rejection {frac:.4%}, planted caught {caught:.0%}, oracle err {err:.1e}"


@criterion(6, "aggregation golden rows")
def test_aggregation_golden():
    got = [[round(float(v), 12) for v in aggregate_assets(CensusRow("g", r))] for r in golden_rows()]
    assert len(got) == 50 and got == GOLDEN
    return "50 rows x 16 indicators bit-equal"


@criterion(7, "skew reduction")
def test_skew_reduction():
    rng = np.random.default_rng(7)
    tail = np.clip(np.round(rng.exponential(1.0, 2000) ** 1.5 * 3) + 1, 1, 63)
    values = np.concatenate([np.zeros(2000), tail]).astype(int)
    cells = [NightCell(f"c{i:05d}", int(v), "img") for i, v in enumerate(values)]
    assert skewness(values) > 3
    try:
        a = undersample_skew(cells, 0.4, seed=0)
    except UnreachableTarget as exc:
        raise AssertionError(f"initial skew {skewness(values):.2f}; removing modal cells bottoms out at "
                             f"{exc.achieved:.3f} > 0.4") from exc
    b = undersample_skew(cells, 0.4, seed=0)
    final = skewness([c.intensity for c in a])
    assert [c.cell_id for c in a] == [c.cell_id for c in b]
    assert final <= 0.4
    return f"skew {skewness(values):.2f} -> {final:.3f}"


def _transfer_scores(seed):
    world = synth_generate(SynthConfig(villages=1200, relation="monotone", noise=0.3, shared_noise=1.0,
                                       district_block=2, seed=200 + seed))
    run = train_direct(world)
    x = world.image_float()
    sources = {
        "trained": extract_features(run.model, x),
        "raw": aggregate_all(world.census),
        "untrained": extract_features(untrained_regressor(x, len(INDICATORS), seed=seed), x),
    }
    mapping = dict(zip(world.village_ids, world.districts))
    names = ["literacy", "sanitation", "immunized"]
    out = {}
    for label, feats in sources.items():
        recs = aggregate_district(world.village_ids, feats, mapping, world.district_table)
        fx, fy = district_matrix(recs, names)
        out[label] = [crossval(fx, fy[:, j], 5, HeadConfig(layers=1)).mean for j in range(len(names))]
    return out


@criterion(8, "transfer ordering")
def test_transfer_ordering():
    worst_margin = np.inf
    for seed in range(5):
        sc = _transfer_scores(seed)
        for j in range(3):
            margin = sc["trained"][j] - max(sc["raw"][j], sc["untrained"][j])
            worst_margin = min(worst_margin, margin)
    assert worst_margin > 0, f"smallest margin {worst_margin:.3f}"
    return f"trained beats raw and untrained on 3 targets x 5 seeds, smallest margin {worst_margin:.3f}"


@criterion(9, "OLS oracle equivalence")
def test_ols_oracle():
    worst = 0.0
    for k in range(100):
        rng = np.random.default_rng([9, k])
        n, p = int(rng.integers(20, 200)), int(rng.integers(1, 8))
        X = np.column_stack([np.ones(n), rng.normal(size=(n, p)) * rng.uniform(0.5, 5, p)])
        y = X @ rng.normal(size=p + 1) + rng.normal(size=n)
        fit = ols_fit(X, y)
        beta, se = ols_normal_equations(X, y)
        worst = max(worst, np.max(np.abs(fit.coef - beta)), np.max(np.abs(fit.se - se)))
    assert worst < 1e-8, f"max deviation {worst:.2e}"
    for seed in range(10):
        fits = run_specs(synth_records(2000, seed=seed))
        r2 = [fits[s.name].r2 for s in STANDARD_SPECS]
        assert all(a <= b for a, b in zip(r2, r2[1:])), f"seed {seed}: {r2}"
    return f"max deviation {worst:.1e}; m1<=m2<=m3<=m4 on 10 datasets"


@criterion(10, "Monte Carlo calibration")
def test_monte_carlo_calibration():
    rep = repeated_sampling(synth_records(20000, seed=1), VILLAGE_SPEC, sample_size=3500, runs=100, seed=3)
    edu = rep.significant("women_sec_edu", 0.01, "-")
    noise = rep.significant("noise_control", 0.05)
    lo, hi = binomial_interval(100, 0.05)
    assert edu >= 95 and lo <= noise <= hi, f"education {edu}, noise {noise} vs [{lo}, {hi}]"
    return f"education flagged {edu}/100 at 1%; noise control {noise}/100 at 5% in [{lo}, {hi}]"


@criterion(11, "edge detection")
def test_edge_detection():
    g = np.full((8, 12), 5.0)
    g[:, 6:] = 45.0
    em = detect_edges(GeoGrid(g), threshold=0.0)
    want = np.zeros(g.shape, bool)
    want[:, 5:7] = True
    assert np.array_equal(em.mask, want)
    assert not detect_edges(GeoGrid(np.full((6, 6), 2.0))).mask.any()
    r = np.random.default_rng(11).integers(-50, 50, (9, 7)).astype(float)
    assert np.array_equal(gradient_magnitude(GeoGrid(r)), central_differences(r))
    return "step boundary exact, constant grid empty, gradients equal hand differences"


@criterion(12, "occlusion closed form")
def test_occlusion_closed_form():
    net = mean_pixel_net((1, 64, 64))
    heat = occlusion_heatmap(net_predictor(net), np.ones((1, 64, 64)), occluder=16, stride=8, fill=0.0)
    err = np.max(np.abs(heat.values - (1 - 256 / 4096)))
    assert err < 1e-10
    return f"max deviation {err:.1e} over {heat.values.size} cells"


def _chain(root: Path, monkeypatch):
    root.mkdir()
    monkeypatch.chdir(root)
    steps = [
        ["synth", "--villages", "150", "--size", "32", "--district-block", "2", "--out", "world"],
        ["aggregate", "--world", "world", "--out", "agg"],
        ["train", "--world", "world", "--epochs", "2", "--out", "train"],
        ["train", "--world", "world", "--mode", "night", "--epochs", "2", "--out", "night"],
        ["transfer", "--world", "world", "--model", "train/model.json", "--folds", "3", "--epochs", "30",
         "--out", "transfer"],
        ["analyze", "--world", "world", "--model", "train/model.json", "--occluder", "8", "--out", "analyze"],
        ["econ", "--villages", "2000", "--sample-size", "500", "--runs", "10", "--out", "econ"],
    ]
    for argv in steps:
        assert cli_main(argv + ["--seed", "13"]) == 0, argv
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.suffix in (".json", ".csv")}


@criterion(13, "CLI determinism")
def test_cli_determinism(tmp_path, monkeypatch):
    a = _chain(tmp_path / "first", monkeypatch)
    b = _chain(tmp_path / "second", monkeypatch)
    assert a.keys() == b.keys() and len(a) > 20
    diff = [str(k) for k in a if a[k] != b[k]]
    assert not diff, f"differing artifacts: {diff}"
    return f"{len(a)} JSON/CSV artifacts byte-identical"
