"""OLS specifications for the stunting case study, repeated subsampling, KDE and power."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats

from .synth import rng_for

LEVELS = (0.01, 0.05, 0.10)


class RankDeficient(np.linalg.LinAlgError):
    def __init__(self, column):
        super().__init__(f"design is rank deficient: column {column!r} is linearly dependent on earlier ones")
        self.column = column


class DegenerateSample(ValueError):
    """All values identical: the density is a spike, not a curve."""


@dataclass(frozen=True)
class SpecModel:
    name: str
    outcome: str
    regressors: tuple  # (column, "identity" | "log") pairs
    categoricals: tuple = ()  # (column, base level) pairs

    @property
    def labels(self) -> list[str]:
        return [f"ln({c})" if t == "log" else c for c, t in self.regressors]


def _spec(name, *cols, categoricals=()):
    return SpecModel(name, "stunting",
                     tuple((c[3:-1], "log") if c.startswith("ln(") else (c, "identity") for c in cols),
                     categoricals)


M1 = _spec("m1", "ln(opendefecation)")
M2 = _spec("m2", "ln(opendefecation)", "ln(mpce)", "calories", "cereal_calories", "householdsizeunder5")
M3 = _spec("m3", *[f"ln({c})" if t == "log" else c for c, t in M2.regressors], "literacy_rate", "women_lit")
M4 = _spec("m4", *[f"ln({c})" if t == "log" else c for c, t in M3.regressors],
           "mom_folic", "women_sec_edu", "mom_full_ant_care", "caesarean_birth", "children_vita",
           "women_bmi_below_norm", "clean_fuel")
STANDARD_SPECS = (M1, M2, M3, M4)

# village-level variant: permanent houses as an extra control, states against Uttar Pradesh
VILLAGE_SPEC = SpecModel("village", "stunting",
                         M4.regressors + (("permanent_house", "identity"), ("noise_control", "identity")),
                         (("state", "UP"),))


@dataclass
class Design:
    X: np.ndarray
    y: np.ndarray
    names: list
    dropped: list  # (row label, reason)
    rows: list  # labels of kept rows


def build_design(records: pd.DataFrame, spec: SpecModel) -> Design:
    """Intercept + transformed regressors + dummies; rows unusable under the spec are dropped and reported."""
    cols = [spec.outcome] + [c for c, _ in spec.regressors] + [c for c, _ in spec.categoricals]
    missing = [c for c in cols if c not in records.columns]
    if missing:
        raise KeyError(f"records lack columns {missing}")
    df = records
    ok = np.ones(len(df), dtype=bool)
    dropped = []
    y = pd.to_numeric(df[spec.outcome], errors="coerce").to_numpy(dtype=float)
    bad = ~np.isfinite(y)
    for lab in df.index[bad & ok]:
        dropped.append((lab, f"missing {spec.outcome}"))
    ok &= ~bad
    parts, names = [np.ones(len(df))], ["const"]
    for (c, t), label in zip(spec.regressors, spec.labels):
        v = pd.to_numeric(df[c], errors="coerce").to_numpy(dtype=float)
        bad = ~np.isfinite(v)
        if t == "log":
            bad |= ~(v > 0)
            with np.errstate(divide="ignore", invalid="ignore"):
                v = np.log(v)
        elif t != "identity":
            raise ValueError(f"unknown transform {t!r}")
        for lab in df.index[bad & ok]:
            dropped.append((lab, f"{c} not usable under {t}"))
        ok &= ~bad
        parts.append(v)
        names.append(label)
    for c, base in spec.categoricals:
        v = df[c].astype(str).to_numpy()
        levels = sorted(set(v[ok]) - {str(base)})
        for lev in levels:
            parts.append((v == lev).astype(float))
            names.append(f"{c}[{lev}]")
    if not ok.any():
        raise ValueError(f"no usable rows for spec {spec.name}")
    X = np.column_stack(parts)[ok]
    return Design(X, y[ok], names, dropped, list(df.index[ok]))


@dataclass
class OlsFit:
    names: list
    coef: np.ndarray
    se: np.ndarray
    t: np.ndarray
    p: np.ndarray
    r2: float
    n: int
    df_resid: int
    residuals: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {"names": list(self.names), "coef": self.coef.tolist(), "se": self.se.tolist(),
                "t": self.t.tolist(), "p": self.p.tolist(), "r2": self.r2, "n": self.n}

    def __getitem__(self, name):
        i = self.names.index(name)
        return self.coef[i], self.se[i], self.p[i]


def ols_fit(X, y, names=None, robust=False) -> OlsFit:
    """Least squares by QR with classical (or HC1) standard errors and Student-t p-values."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = X.shape
    names = list(names) if names is not None else [f"x{i}" for i in range(k)]
    if n <= k:
        raise ValueError(f"need more rows than columns ({n} <= {k})")
    q, r = np.linalg.qr(X)
    diag = np.abs(np.diag(r))
    scale = np.linalg.norm(X, axis=0)
    tol = max(n, k) * np.finfo(float).eps * 1e3
    for j in range(k):
        if scale[j] == 0 or diag[j] <= tol * max(scale[j], 1e-300):
            raise RankDeficient(names[j])
    coef = np.linalg.solve(r, q.T @ y)
    resid = y - X @ coef
    dof = n - k
    rinv = np.linalg.solve(r, np.eye(k))  # triangular, so (X'X)^-1 = R^-1 R^-T
    xtx_inv = rinv @ rinv.T
    if robust:
        meat = (X * resid[:, None] ** 2).T @ X
        cov = xtx_inv @ meat @ xtx_inv * n / dof
    else:
        cov = xtx_inv * (resid @ resid / dof)
    se = np.sqrt(np.diag(cov))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = coef / se  # an exact fit gives se = 0 and infinite t
    p = 2.0 * stats.t.sf(np.abs(t), dof)
    yc = y - y.mean()
    ss_tot = float(yc @ yc)
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else float("nan")
    return OlsFit(names, coef, se, t, p, r2, n, dof, resid)


def fit_spec(records: pd.DataFrame, spec: SpecModel, robust=False) -> OlsFit:
    d = build_design(records, spec)
    return ols_fit(d.X, d.y, d.names, robust)


def run_specs(records: pd.DataFrame, specs=STANDARD_SPECS, robust=False) -> dict:
    return {s.name: fit_spec(records, s, robust) for s in specs}


def format_table(fits: dict) -> str:
    """Fixed-width comparison table: coefficient rows with (se) beneath, then R-squared and N."""
    order = []
    for f in fits.values():
        for nm in f.names:
            if nm != "const" and nm not in order:
                order.append(nm)
    order.append("const")
    cols = list(fits)
    w0 = max(22, max(len(n) for n in order) + 2)
    lines = [" " * w0 + "".join(f"{c:>12}" for c in cols), " " * w0 + "".join(f"{'b/se':>12}" for _ in cols)]
    for nm in order:
        brow, serow = [], []
        for c in cols:
            f = fits[c]
            if nm in f.names:
                i = f.names.index(nm)
                brow.append(f"{f.coef[i]:12.3f}")
                serow.append(f"{'(' + format(f.se[i], '.3f') + ')':>12}")
            else:
                brow.append(" " * 12)
                serow.append(" " * 12)
        label = "Constant" if nm == "const" else nm
        lines.append(f"{label:<{w0}}" + "".join(brow))
        lines.append(" " * w0 + "".join(serow))
    lines.append(f"{'R-squared':<{w0}}" + "".join(f"{fits[c].r2:12.3f}" for c in cols))
    lines.append(f"{'N':<{w0}}" + "".join(f"{fits[c].n:12d}" for c in cols))
    return "\n".join(lines) + "\n"


# -- repeated sampling -------------------------------------------------------

@dataclass
class MonteCarloReport:
    names: list
    runs: int
    sample_size: int
    positive: dict  # level -> counts per variable
    negative: dict
    coefs: np.ndarray  # (completed runs, variables)
    failed: list  # (run index, reason)
    r2: list

    def significant(self, name, level=0.05, sign=None) -> int:
        i = self.names.index(name)
        pos, neg = int(self.positive[level][i]), int(self.negative[level][i])
        return pos if sign == "+" else neg if sign == "-" else pos + neg

    def to_dict(self) -> dict:
        return {
            "names": list(self.names), "runs": self.runs, "sample_size": self.sample_size,
            "significance": {
                str(lv): {"positive": self.positive[lv].tolist(), "negative": self.negative[lv].tolist()}
                for lv in LEVELS},
            "failed_runs": [[i, r] for i, r in self.failed],
            "mean_r2": float(np.mean(self.r2)) if self.r2 else None,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def repeated_sampling(records: pd.DataFrame, spec: SpecModel, sample_size=3500, runs=100, seed=0,
                      robust=False) -> MonteCarloReport:
    """Refit ``spec`` on ``runs`` seeded subsamples (without replacement) and tally significance by sign."""
    n = len(records)
    if n < sample_size:
        raise ValueError(f"{n} records cannot supply samples of {sample_size}")
    children = np.random.SeedSequence(seed).spawn(runs)
    names = None
    pos = {lv: None for lv in LEVELS}
    neg = {lv: None for lv in LEVELS}
    coefs, failed, r2 = [], [], []
    for i, child in enumerate(children):
        idx = np.sort(np.random.default_rng(child).choice(n, size=sample_size, replace=False))
        try:
            fit = fit_spec(records.iloc[idx], spec, robust)
        except (RankDeficient, ValueError) as exc:
            failed.append((i, str(exc)))
            continue
        if names is None:
            names = fit.names
            for lv in LEVELS:
                pos[lv] = np.zeros(len(names), dtype=int)
                neg[lv] = np.zeros(len(names), dtype=int)
        if fit.names != names:
            failed.append((i, "design columns differ from first run"))
            continue
        for lv in LEVELS:
            sig = fit.p < lv
            pos[lv] += sig & (fit.coef > 0)
            neg[lv] += sig & (fit.coef < 0)
        coefs.append(fit.coef)
        r2.append(fit.r2)
    if names is None:
        raise ValueError("every run failed")
    return MonteCarloReport(names, runs, sample_size, pos, neg, np.array(coefs), failed, r2)


# -- kernel density ----------------------------------------------------------

def silverman_bandwidth(values) -> float:
    x = np.asarray(values, dtype=float)
    sd = x.std(ddof=1)
    iqr = np.subtract(*np.percentile(x, [75, 25]))
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    return 0.9 * spread * len(x) ** (-0.2)


def kde(values, bandwidth="silverman", grid=None, points=512):
    """Gaussian kernel density; returns (x, density).  The default grid extends 4 bandwidths past the data."""
    x = np.asarray(values, dtype=float)
    if x.size < 2:
        raise ValueError("KDE needs at least 2 values")
    if np.ptp(x) == 0:
        raise DegenerateSample(f"all {x.size} values equal {x[0]!r}")
    h = silverman_bandwidth(x) if bandwidth == "silverman" else float(bandwidth)
    if not h > 0:
        raise ValueError("bandwidth must be positive")
    if grid is None:
        grid = np.linspace(x.min() - 4 * h, x.max() + 4 * h, points)
    grid = np.asarray(grid, dtype=float)
    dens = np.zeros_like(grid)
    for chunk in np.array_split(x, max(1, x.size // 2048)):
        u = (grid[:, None] - chunk[None, :]) / h
        dens += np.exp(-0.5 * u * u).sum(axis=1)
    return grid, dens / (x.size * h * math.sqrt(2 * math.pi))


# -- power -------------------------------------------------------------------

@dataclass(frozen=True)
class PowerSpec:
    f2: float
    alpha: float = 0.05
    power: float = 0.95
    predictors: int = 1

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must be in (0, 1)")
        if not self.alpha < self.power < 1:
            raise ValueError("power must be in (alpha, 1)")
        if not self.f2 > 0:
            raise ValueError("f2 must be positive")
        if self.predictors < 1:
            raise ValueError("need at least one predictor")


def regression_power(f2, n, predictors, alpha=0.05) -> float:
    """Power of the overall F test of a linear regression with noncentrality f2 * n."""
    df2 = n - predictors - 1
    if df2 < 1:
        return 0.0
    crit = stats.f.isf(alpha, predictors, df2)
    return float(stats.ncf.sf(crit, predictors, df2, f2 * n))


def power_sample_size(spec: PowerSpec) -> int:
    """Smallest N reaching the requested power."""
    k = spec.predictors
    lo = k + 2
    if regression_power(spec.f2, lo, k, spec.alpha) >= spec.power:
        return lo
    hi = lo
    while regression_power(spec.f2, hi, k, spec.alpha) < spec.power:
        hi *= 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if regression_power(spec.f2, mid, k, spec.alpha) >= spec.power:
            hi = mid
        else:
            lo = mid
    return hi


def simulated_power(f2, n, predictors, alpha=0.05, sims=2000, seed=0) -> float:
    """Rejection rate of the overall F test on data drawn with population effect size f2."""
    rng = np.random.default_rng(seed)
    k = predictors
    beta = np.full(k, math.sqrt(f2 / k))
    crit = stats.f.isf(alpha, k, n - k - 1)
    hits = 0
    for _ in range(sims):
        X = rng.standard_normal((n, k))
        y = X @ beta + rng.standard_normal(n)
        Xd = np.column_stack([np.ones(n), X])
        coef, *_ = np.linalg.lstsq(Xd, y, rcond=None)
        resid = y - Xd @ coef
        ssr = resid @ resid
        sst = np.sum((y - y.mean()) ** 2)
        F = ((sst - ssr) / k) / (ssr / (n - k - 1))
        hits += F > crit
    return hits / sims


# -- planted records ---------------------------------------------------------

TRUE_COEFS = {
    "const": 60.0,
    "ln(opendefecation)": 1.5,
    "ln(mpce)": -2.0,
    "calories": -0.004,
    "cereal_calories": 0.008,
    "householdsizeunder5": -0.2,
    "literacy_rate": -0.3,
    "women_lit": -0.1,
    "mom_folic": 0.05,
    "women_sec_edu": -0.35,
    "mom_full_ant_care": -0.02,
    "caesarean_birth": -0.02,
    "children_vita": -0.1,
    "women_bmi_below_norm": 0.2,
    "clean_fuel": -0.03,
    "permanent_house": -0.05,
    "noise_control": 0.0,
}
STATES = ("UP", "BR", "WB", "JH", "PB", "HR")
STATE_EFFECTS = {"UP": 0.0, "BR": -1.0, "WB": -3.0, "JH": -1.5, "PB": -4.0, "HR": -3.5}


def synth_records(n, seed=0, noise_sd=4.0, coefs=None, label="econ", state_effects=None) -> pd.DataFrame:
    """Village/district records whose stunting rate follows ``coefs`` exactly plus Gaussian noise.

    Regressors share a latent development factor, so they are correlated as
    real socio-economic variables are.  ``noise_control`` never enters the outcome.
    """
    coefs = dict(TRUE_COEFS if coefs is None else coefs)
    rng = rng_for(seed, label)
    dev = rng.uniform(0.0, 1.0, n)

    def pct(centre, slope, sd):
        return np.clip(centre + slope * dev + rng.normal(0.0, sd, n), 0.5, 99.5)

    df = pd.DataFrame({
        "opendefecation": pct(85.0, -70.0, 8.0),
        "mpce": np.exp(7.0 + 0.8 * dev + rng.normal(0.0, 0.2, n)),
        "calories": 1700.0 + 400.0 * dev + rng.normal(0.0, 150.0, n),
        "cereal_calories": 1300.0 - 300.0 * dev + rng.normal(0.0, 120.0, n),
        "householdsizeunder5": pct(30.0, 30.0, 8.0),
        "literacy_rate": pct(45.0, 35.0, 8.0),
        "women_lit": pct(30.0, 40.0, 10.0),
        "mom_folic": pct(20.0, 40.0, 12.0),
        "women_sec_edu": pct(10.0, 45.0, 10.0),
        "mom_full_ant_care": pct(10.0, 30.0, 8.0),
        "caesarean_birth": pct(5.0, 20.0, 5.0),
        "children_vita": pct(40.0, 30.0, 12.0),
        "women_bmi_below_norm": pct(45.0, -25.0, 8.0),
        "clean_fuel": pct(5.0, 50.0, 10.0),
        "permanent_house": pct(30.0, 60.0, 12.0),
        "noise_control": rng.normal(50.0, 10.0, n),
        "state": rng.choice(STATES, size=n),
    })
    y = np.full(n, coefs.get("const", 0.0))
    for name, b in coefs.items():
        if name == "const":
            continue
        col = name[3:-1] if name.startswith("ln(") else name
        v = np.log(df[col].to_numpy()) if name.startswith("ln(") else df[col].to_numpy()
        y += b * v
    effects = STATE_EFFECTS if state_effects is None else state_effects
    y += df["state"].map(effects).fillna(0.0).to_numpy(dtype=float)
    df["stunting"] = y + rng.normal(0.0, noise_sd, n)
    df.index = [f"r{i:06d}" for i in range(n)]
    return df
