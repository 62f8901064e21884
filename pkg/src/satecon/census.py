"""Village census rows -> 16-indicator asset vectors, plus the diagnostics run on them."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import chi2

N_COLUMNS = 140

# (indicator, source columns, divisor).  electronics sums four columns over 3,
# exactly as the source table prints it.
ASSET_TABLE: tuple[tuple[str, tuple[int, ...], float], ...] = (
    ("electronics", (128, 129, 130, 131), 3.0),
    ("water-treated", (72, 74, 77), 1.0),
    ("water-untreated", (73, 75), 1.0),
    ("water-natural", (76, 78, 79, 80, 81), 1.0),
    ("light-electricity", (85, 87), 1.0),
    ("light-oil", (86, 88, 89), 1.0),
    ("has-phone", (132, 133, 134), 1.0),
    ("transport-cycle", (135,), 1.0),
    ("transport-motorized", (136, 137), 1.0),
    ("no-assets", (139,), 1.0),
    ("banking-services", (127,), 1.0),
    ("cook-fuel-processed", (113, 114, 115), 1.0),
    ("bathroom-within", (103, 104), 1.0),
    ("rooms-under-3", (49, 50, 51), 1.0),
    ("household-size-under-5", (56, 57, 58, 59), 1.0),
    ("permanent-house", (140,), 1.0),
)
INDICATORS = tuple(name for name, _, _ in ASSET_TABLE)
N_INDICATORS = len(INDICATORS)
REFERENCED_COLUMNS = tuple(sorted({c for _, cols, _ in ASSET_TABLE for c in cols}))

# indicators that fall as a village develops
DEVELOPMENT_NEGATIVE = frozenset({
    "water-untreated", "water-natural", "light-oil", "no-assets", "rooms-under-3",
})

MAHALANOBIS_THRESHOLD = 30.0


class IngestionError(KeyError):
    def __init__(self, column, village_id=None):
        self.column = column
        self.village_id = village_id
        where = f" (village {village_id})" if village_id is not None else ""
        super().__init__(f"missing census column [{column}]{where}")

    def __str__(self):
        return self.args[0]


class DegenerateCovariance(np.linalg.LinAlgError):
    def __init__(self, message, rank):
        super().__init__(message)
        self.rank = rank


@dataclass(frozen=True)
class CensusRow:
    village_id: str
    columns: Mapping[int, float]


@dataclass(frozen=True)
class OutlierReport:
    village_ids: tuple[str, ...]
    distances: np.ndarray
    rejected: np.ndarray
    threshold: float
    location: np.ndarray
    covariance: np.ndarray

    @property
    def rejection_fraction(self) -> float:
        return float(np.mean(self.rejected)) if len(self.rejected) else 0.0

    @property
    def kept(self) -> np.ndarray:
        return ~self.rejected


# -- aggregation -------------------------------------------------------------

def aggregate_assets(row: CensusRow) -> np.ndarray:
    """Table-1 weighted sums for one village, in INDICATORS order.  Values are not clamped."""
    out = np.empty(N_INDICATORS)
    for k, (_, cols, div) in enumerate(ASSET_TABLE):
        total = 0.0
        for c in cols:
            try:
                total += float(row.columns[c])
            except KeyError:
                raise IngestionError(c, row.village_id) from None
        out[k] = total / div
    if not np.all(np.isfinite(out)):
        raise ValueError(f"non-finite census values for village {row.village_id}")
    return out


def aggregation_matrix() -> np.ndarray:
    """(140, 16) matrix A with assets = columns @ A, columns indexed [1]..[140] -> 0..139."""
    a = np.zeros((N_COLUMNS, N_INDICATORS))
    for k, (_, cols, div) in enumerate(ASSET_TABLE):
        for c in cols:
            a[c - 1, k] = 1.0 / div
    return a


def rows_to_matrix(rows: Sequence[CensusRow]) -> np.ndarray:
    """Dense (n, 140) array; absent columns are NaN."""
    m = np.full((len(rows), N_COLUMNS), np.nan)
    for i, r in enumerate(rows):
        for c, v in r.columns.items():
            if 1 <= c <= N_COLUMNS:
                m[i, c - 1] = v
    return m


def aggregate_all(rows: Sequence[CensusRow]) -> np.ndarray:
    return np.array([aggregate_assets(r) for r in rows]).reshape(len(rows), N_INDICATORS)


# -- correlation / PCA -------------------------------------------------------

def _pearson_columns(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Correlation of every column of ``a`` with every column of ``b``; zero where either is constant."""
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    na = np.sqrt(np.sum(ac * ac, axis=0))
    nb = np.sqrt(np.sum(bc * bc, axis=0))
    num = ac.T @ bc
    den = np.outer(na, nb)
    scale_a = np.maximum(np.abs(a).max(axis=0), 1.0)
    scale_b = np.maximum(np.abs(b).max(axis=0), 1.0)
    ok = np.outer(na > 1e-12 * scale_a * math.sqrt(len(a)), nb > 1e-12 * scale_b * math.sqrt(len(b)))
    out = np.zeros_like(num)
    out[ok] = num[ok] / den[ok]
    return np.clip(out, -1.0, 1.0)


def correlation_matrix(rows: Sequence[CensusRow]) -> np.ndarray:
    """(140, 16) Pearson correlations between raw columns and aggregated indicators."""
    if len(rows) < 3:
        raise ValueError(f"correlation needs at least 3 rows, got {len(rows)}")
    raw = rows_to_matrix(rows)
    missing = np.where(np.isnan(raw).any(axis=0))[0]
    if len(missing):
        raise IngestionError(int(missing[0]) + 1)
    return _pearson_columns(raw, aggregate_all(rows))


@dataclass(frozen=True)
class PcaResult:
    direction: np.ndarray
    scores: np.ndarray
    eigenvalues: np.ndarray

    @property
    def explained_variance_ratio(self) -> float:
        return float(self.eigenvalues[0] / self.eigenvalues.sum())


def pca_first_component(vectors) -> PcaResult:
    """Leading eigenvector of the sample covariance; the largest-magnitude loading is made positive."""
    x = np.asarray(vectors, dtype=float)
    n, p = x.shape
    if n <= p:
        raise ValueError(f"PCA needs more rows than dimensions ({n} <= {p})")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (n - 1)
    vals, vecs = np.linalg.eigh(cov)
    vals, vecs = vals[::-1], vecs[:, ::-1]
    tol = max(vals[0], 0.0) * p * np.finfo(float).eps * 10
    rank = int(np.sum(vals > tol))
    if rank == 0 or (len(vals) > 1 and vals[0] - vals[1] <= tol):
        raise DegenerateCovariance(f"leading eigenvalue not separated (rank {rank})", rank)
    d = vecs[:, 0]
    if d[np.argmax(np.abs(d))] < 0:
        d = -d
    return PcaResult(direction=d, scores=xc @ d, eigenvalues=np.clip(vals, 0.0, None))


# -- Mahalanobis outlier rejection -------------------------------------------

def ridge(cov: np.ndarray, factor=1e-6) -> np.ndarray:
    p = cov.shape[0]
    return cov + np.eye(p) * (factor * np.trace(cov) / p)


def mahalanobis_distances(x, location, covariance) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    try:
        chol = np.linalg.cholesky(covariance)
    except np.linalg.LinAlgError:
        rank = int(np.linalg.matrix_rank(covariance))
        raise DegenerateCovariance(f"covariance singular (rank {rank} of {len(covariance)})", rank) from None
    z = np.linalg.solve(chol, (x - location).T)
    return np.sqrt(np.sum(z * z, axis=0))


def _classical(x):
    mu = x.mean(axis=0)
    xc = x - mu
    return mu, xc.T @ xc / (len(x) - 1)


def _c_steps(x, subset, h, ridge_factor, max_iter=50):
    prev = None
    for _ in range(max_iter):
        mu, cov = _classical(x[subset])
        if ridge_factor:
            cov = ridge(cov, ridge_factor)
        sign, logdet = np.linalg.slogdet(cov)
        if sign <= 0:
            return None
        d = mahalanobis_distances(x, mu, cov)
        new = np.sort(np.argsort(d, kind="stable")[:h])
        if prev is not None and np.array_equal(new, prev):
            break
        prev = subset = new
    return logdet, subset


def robust_location_scatter(x, seed=0, starts=20, support=0.75, ridge_factor=1e-6):
    """Minimum-covariance-determinant estimate by C-steps from seeded random (p+1)-subsets.

    Follows the FastMCD recipe: several elemental starts, C-step each to
    convergence, keep the smallest determinant, rescale for consistency at
    the normal model, then one reweighting pass at the 0.975 chi-square quantile.
    """
    x = np.asarray(x, dtype=float)
    n, p = x.shape
    h = max(int(math.floor(support * n)), (n + p + 1) // 2)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(starts):
        start = np.sort(rng.choice(n, size=p + 1, replace=False))
        mu, cov = _classical(x[start])
        cov = ridge(cov, max(ridge_factor, 1e-9)) if np.trace(cov) > 0 else np.eye(p)
        try:
            d = mahalanobis_distances(x, mu, cov)
        except DegenerateCovariance:
            continue
        subset = np.sort(np.argsort(d, kind="stable")[:h])
        res = _c_steps(x, subset, h, ridge_factor)
        if res is not None and (best is None or res[0] < best[0]):
            best = res
    if best is None:
        mu, cov = _classical(x)
        return mu, ridge(cov, ridge_factor) if ridge_factor else cov
    mu, cov = _classical(x[best[1]])
    if ridge_factor:
        cov = ridge(cov, ridge_factor)
    d = mahalanobis_distances(x, mu, cov)
    cov = cov * (np.median(d ** 2) / chi2.ppf(0.5, p))
    d = mahalanobis_distances(x, mu, cov)
    keep = d ** 2 <= chi2.ppf(0.975, p)
    mu, cov = _classical(x[keep])
    if ridge_factor:
        cov = ridge(cov, ridge_factor)
    return mu, cov


def mahalanobis_filter(vectors, threshold=MAHALANOBIS_THRESHOLD, village_ids=None,
                       estimator="robust", ridge_factor=1e-6, seed=0) -> OutlierReport:
    """Reject villages whose Mahalanobis distance from the bulk exceeds ``threshold``.

    ``estimator="classical"`` uses the plain sample mean and (ridged)
    covariance.  That estimate is pulled toward the outliers: the squared
    distances sum to (n-1)*p, so no more than (n-1)*p/threshold^2 rows can
    ever clear the threshold (about 1.8% for p=16 at 30).  The default
    ``"robust"`` estimate (MCD) is what makes a 5% contamination detectable.
    """
    x = np.asarray(vectors, dtype=float)
    n, p = x.shape
    if n <= p:
        raise ValueError(f"Mahalanobis filter needs more rows than dimensions ({n} <= {p})")
    if estimator == "classical":
        mu, cov = _classical(x)
        if ridge_factor:
            cov = ridge(cov, ridge_factor)
    elif estimator == "robust":
        mu, cov = robust_location_scatter(x, seed=seed, ridge_factor=ridge_factor)
    else:
        raise ValueError(f"unknown estimator {estimator!r}")
    d = mahalanobis_distances(x, mu, cov)
    ids = tuple(village_ids) if village_ids is not None else tuple(str(i) for i in range(n))
    return OutlierReport(ids, d, d > threshold, float(threshold), mu, cov)


# -- CSV I/O -----------------------------------------------------------------

def column_header(c: int) -> str:
    return f"[{c}]"


def read_census_csv(path) -> list[CensusRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        cols = []
        for h in header[1:]:
            h = h.strip()
            if not (h.startswith("[") and h.endswith("]")):
                raise ValueError(f"bad census header field {h!r}")
            cols.append(int(h[1:-1]))
        for rec in reader:
            if not rec:
                continue
            rows.append(CensusRow(rec[0], {c: float(v) for c, v in zip(cols, rec[1:])}))
    return rows


def write_census_csv(rows: Sequence[CensusRow], path) -> None:
    cols = sorted({c for r in rows for c in r.columns})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["village_id"] + [column_header(c) for c in cols])
        for r in rows:
            w.writerow([r.village_id] + [repr(float(r.columns[c])) for c in cols])


def write_assets_csv(ids, assets, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["village_id", *INDICATORS])
        for vid, vec in zip(ids, assets):
            w.writerow([vid] + [repr(float(v)) for v in vec])


def read_assets_csv(path):
    ids, vals = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header[1:]) != INDICATORS:
            raise ValueError("asset CSV columns do not match the indicator list")
        for rec in reader:
            ids.append(rec[0])
            vals.append([float(v) for v in rec[1:]])
    return ids, np.array(vals).reshape(len(ids), N_INDICATORS)


def write_outlier_csv(report: OutlierReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["village_id", "distance", "rejected", "threshold"])
        for vid, d, r in zip(report.village_ids, report.distances, report.rejected):
            w.writerow([vid, repr(float(d)), int(r), report.threshold])


def write_correlation_csv(corr, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["column", *INDICATORS])
        for c in range(corr.shape[0]):
            w.writerow([column_header(c + 1)] + [repr(float(v)) for v in corr[c]])


def load_world_census(path) -> tuple[list[str], np.ndarray]:
    rows = read_census_csv(Path(path))
    return [r.village_id for r in rows], aggregate_all(rows)
