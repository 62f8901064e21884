import numpy as np
import pandas as pd
import pytest
from hypothesis import given, strategies as st
from scipy import stats
from scipy.integrate import trapezoid

from satecon.econ import (M1, M4, STANDARD_SPECS, TRUE_COEFS, VILLAGE_SPEC, DegenerateSample, PowerSpec,
                          RankDeficient, SpecModel, build_design, fit_spec, format_table, kde, ols_fit,
                          power_sample_size, regression_power, repeated_sampling, run_specs, simulated_power,
                          synth_records)

from oracles import binomial_interval, ols_normal_equations

NOISE_SPEC = SpecModel("null", "stunting", (("noise_control", "identity"),))
M4_COEFS = {k: v for k, v in TRUE_COEFS.items() if k not in ("permanent_house", "noise_control")}


def _small_frame():
    return pd.DataFrame({
        "stunting": [40.0, 42.0, 39.0, 45.0, 41.0, 44.0],
        "opendefecation": [10.0, 0.0, 30.0, 25.0, 5.0, 50.0],
        "state": ["UP", "BR", "WB", "UP", "BR", "WB"],
    }, index=list("abcdef"))


def test_design_drops_non_positive_log_rows():
    d = build_design(_small_frame(), M1)
    assert d.rows == list("acdef")
    assert [lab for lab, _ in d.dropped] == ["b"]
    assert d.names == ["const", "ln(opendefecation)"]
    assert np.allclose(d.X[:, 1], np.log([10, 30, 25, 5, 50]))


def test_design_state_dummies_against_base():
    spec = SpecModel("s", "stunting", (("opendefecation", "identity"),), (("state", "UP"),))
    d = build_design(_small_frame(), spec)
    assert d.names == ["const", "opendefecation", "state[BR]", "state[WB]"]
    assert d.X[:, 2:].sum(axis=0).tolist() == [2.0, 2.0]
    assert not d.X[[0, 3], 2:].any()


def test_design_errors():
    with pytest.raises(KeyError):
        build_design(_small_frame().drop(columns="opendefecation"), M1)
    df = _small_frame()
    df["opendefecation"] = 0.0
    with pytest.raises(ValueError):
        build_design(df, M1)


def test_exact_linear_fit():
    x = np.arange(10.0)
    fit = ols_fit(np.column_stack([np.ones(10), x]), 3.0 - 0.5 * x)
    assert fit.r2 == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(fit.coef, [3.0, -0.5])


def test_two_point_slope():
    # with an intercept two points leave no residual degrees of freedom
    with pytest.raises(ValueError):
        ols_fit([[1.0, 0.0], [1.0, 1.0]], [0.0, 2.0])
    fit = ols_fit([[0.0], [1.0]], [0.0, 2.0])
    assert fit.coef[0] == pytest.approx(2.0)


def test_matches_normal_equations():
    rng = np.random.default_rng(0)
    X = np.column_stack([np.ones(50), rng.normal(size=(50, 3))])
    y = X @ [1.0, 2.0, -1.0, 0.5] + rng.normal(size=50)
    fit = ols_fit(X, y)
    beta, se = ols_normal_equations(X, y)
    assert np.allclose(fit.coef, beta, atol=1e-8)
    assert np.allclose(fit.se, se, atol=1e-8)
    assert fit.df_resid == 46
    assert np.allclose(fit.p, 2 * stats.t.sf(np.abs(beta / se), 46), atol=1e-8)


def test_rank_deficiency_names_column():
    rng = np.random.default_rng(1)
    a = rng.normal(size=30)
    X = np.column_stack([np.ones(30), a, 2 * a - 1, rng.normal(size=30)])
    with pytest.raises(RankDeficient) as exc:
        ols_fit(X, rng.normal(size=30), ["const", "a", "a_copy", "b"])
    assert exc.value.column == "a_copy"


@given(st.integers(0, 10 ** 6))
def test_residuals_orthogonal_to_design(seed):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(40), rng.normal(size=(40, 3)) * rng.uniform(0.1, 100, 3)])
    y = rng.normal(size=40) * 10
    fit = ols_fit(X, y)
    assert np.max(np.abs(X.T @ fit.residuals)) < 1e-8 * np.linalg.norm(y) * np.linalg.norm(X, axis=0).max()


@given(st.integers(0, 10 ** 6), st.floats(0.01, 100.0), st.integers(1, 3))
def test_rescaling_a_regressor(seed, c, j):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(60), rng.normal(size=(60, 3))])
    y = X @ rng.normal(size=4) + rng.normal(size=60)
    base = ols_fit(X, y)
    Xs = X.copy()
    Xs[:, j] *= c
    scaled = ols_fit(Xs, y)
    assert scaled.coef[j] == pytest.approx(base.coef[j] / c, rel=1e-10, abs=1e-12)
    assert np.allclose(scaled.t, base.t, rtol=1e-10, atol=1e-10)
    assert np.allclose(scaled.p, base.p, rtol=1e-10, atol=1e-10)
    assert scaled.r2 == pytest.approx(base.r2, abs=1e-10)


def test_hc1_errors_differ_but_coefficients_agree():
    df = synth_records(800, seed=4)
    a, b = fit_spec(df, M4), fit_spec(df, M4, robust=True)
    assert np.array_equal(a.coef, b.coef)
    assert not np.allclose(a.se, b.se)


def test_planted_coefficients_covered():
    # true model: M4 regressors, no state effects
    names = ["const"] + M4.labels
    truth = np.array([M4_COEFS[n] for n in names])
    inside = total = 0
    for w in range(100):
        fit = fit_spec(synth_records(600, seed=w, coefs=M4_COEFS, state_effects={}), M4)
        inside += int(np.sum(np.abs(fit.coef - truth) <= 2 * fit.se))
        total += len(truth)
    assert inside / total >= 0.90


def test_nested_specs_r2_monotone():
    df = synth_records(3000, seed=2)
    fits = run_specs(df)
    r2 = [fits[s.name].r2 for s in STANDARD_SPECS]
    assert all(a <= b + 1e-12 for a, b in zip(r2, r2[1:]))
    table = format_table(fits)
    assert "Constant" in table and "R-squared" in table and table.count("\n") == 2 + 2 * 15 + 2


def test_null_regressor_rejects_at_nominal_rate():
    hits = 0
    trials = 400
    for w in range(trials):
        df = synth_records(200, seed=w, coefs={"const": 30.0}, state_effects={})
        hits += fit_spec(df, NOISE_SPEC).p[1] < 0.05
    lo, hi = binomial_interval(trials, 0.05)
    assert lo <= hits <= hi


def test_repeated_sampling_single_run_equals_single_fit():
    df = synth_records(2000, seed=5)
    rep = repeated_sampling(df, VILLAGE_SPEC, sample_size=500, runs=1, seed=9)
    child = np.random.SeedSequence(9).spawn(1)[0]
    idx = np.sort(np.random.default_rng(child).choice(2000, size=500, replace=False))
    fit = fit_spec(df.iloc[idx], VILLAGE_SPEC)
    assert np.array_equal(rep.coefs[0], fit.coef)
    for lv in (0.01, 0.05, 0.10):
        sig = fit.p < lv
        assert rep.positive[lv].tolist() == (sig & (fit.coef > 0)).astype(int).tolist()
        assert rep.negative[lv].tolist() == (sig & (fit.coef < 0)).astype(int).tolist()


def test_repeated_sampling_reproducible_and_counts_bounded():
    df = synth_records(3000, seed=6)
    a = repeated_sampling(df, M4, sample_size=400, runs=20, seed=1)
    b = repeated_sampling(df, M4, sample_size=400, runs=20, seed=1)
    assert a.to_json() == b.to_json()
    for lv in (0.01, 0.05, 0.10):
        assert np.all(a.positive[lv] + a.negative[lv] <= 20)
    assert np.all(a.positive[0.01] <= a.positive[0.05]) and np.all(a.positive[0.05] <= a.positive[0.10])
    with pytest.raises(ValueError):
        repeated_sampling(df, M4, sample_size=5000)


def test_repeated_sampling_records_rank_deficient_runs():
    df = synth_records(300, seed=7)
    df["rare"] = 0.0
    df.iloc[:3, df.columns.get_loc("rare")] = 1.0
    spec = SpecModel("rare", "stunting", (("calories", "identity"), ("rare", "identity")))
    rep = repeated_sampling(df, spec, sample_size=30, runs=20, seed=0)
    assert rep.failed and all("rare" in reason for _, reason in rep.failed)
    assert len(rep.coefs) + len(rep.failed) == 20


@pytest.mark.slow
def test_null_tally_meta_trials():
    # each meta-trial: 100 subsample fits on a fresh null world, tally at 5%
    lo, hi = binomial_interval(100, 0.05)
    inside = 0
    for m in range(100):
        df = synth_records(5000, seed=1000 + m, coefs={"const": 30.0}, state_effects={})
        rep = repeated_sampling(df, NOISE_SPEC, sample_size=200, runs=100, seed=m)
        inside += lo <= rep.significant("noise_control", 0.05) <= hi
    assert inside >= 99


def test_kde_integrates_to_one():
    x = np.random.default_rng(0).gamma(2.0, 3.0, 500)
    grid, dens = kde(x)
    assert trapezoid(dens, grid) == pytest.approx(1.0, abs=1e-3)


def test_kde_symmetric_data():
    half = np.random.default_rng(1).normal(size=200)
    x = np.concatenate([half, -half])
    grid, dens = kde(x, grid=np.linspace(-5, 5, 201))
    assert np.allclose(dens, dens[::-1], atol=1e-12)


def test_kde_normal_peak():
    x = np.random.default_rng(2).standard_normal(10000)
    grid, dens = kde(x, grid=np.linspace(-4, 4, 801))
    assert abs(grid[np.argmax(dens)]) <= 0.1


def test_kde_degenerate():
    with pytest.raises(DegenerateSample):
        kde(np.full(50, 3.0))


def test_power_monotone():
    ns = [power_sample_size(PowerSpec(f2)) for f2 in (0.02, 0.05, 0.15, 0.35)]
    assert ns == sorted(ns, reverse=True)
    ps = [power_sample_size(PowerSpec(0.05, power=p)) for p in (0.6, 0.8, 0.9, 0.95)]
    assert ps == sorted(ps)
    n = power_sample_size(PowerSpec(0.05, power=0.9, predictors=3))
    assert regression_power(0.05, n, 3) >= 0.9 > regression_power(0.05, n - 1, 3)


def test_power_spec_validation():
    for kw in ({"f2": 0.0}, {"f2": 0.1, "alpha": 1.0}, {"f2": 0.1, "power": 0.01}, {"f2": 0.1, "predictors": 0}):
        with pytest.raises(ValueError):
            PowerSpec(**kw)


def test_simulated_power_agrees():
    n = power_sample_size(PowerSpec(0.05, power=0.9, predictors=3))
    rate = simulated_power(0.05, n, 3, sims=3000, seed=1)
    assert abs(rate - 0.9) <= 0.03
