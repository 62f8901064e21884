"""Planted-ground-truth villages: images, census rows, night lights and a grid layout.

Every village gets a latent development level.  Its image is a grey
background with vegetation patches (unrelated to development) and small
bright houses whose number grows with development.  The census columns are
functions of the *realised* built-up fraction of that image, so with zero
noise and the linear relation every asset indicator is an exact affine
function of the built-up pixel count.
"""

from __future__ import annotations

import csv
import json
import math
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .census import ASSET_TABLE, DEVELOPMENT_NEGATIVE, N_COLUMNS, REFERENCED_COLUMNS, CensusRow
from .imageio import read_pgm, write_pgm

BACKGROUND = 64
VEGETATION = 150
HOUSE = 230
NIGHT_LEVELS = 63


def subseed(seed: int, label: str) -> np.random.SeedSequence:
    """Independent stream for a named component of a seeded run."""
    return np.random.SeedSequence([int(seed), zlib.crc32(label.encode())])


def rng_for(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(subseed(seed, label))


@dataclass(frozen=True)
class SynthConfig:
    villages: int = 200
    image_size: int = 64
    relation: str = "linear"  # or "monotone"
    noise: float = 0.1
    outlier_fraction: float = 0.0
    seed: int = 0
    shared_noise: float = 0.0
    light_spread: float = 0.0
    district_block: int = 3
    vegetation: bool = True

    def __post_init__(self):
        if self.relation not in ("linear", "monotone"):
            raise ValueError(f"unknown relation {self.relation!r}")
        if not 0.0 <= self.outlier_fraction < 0.5:
            raise ValueError("outlier fraction must be in [0, 0.5)")
        if self.noise < 0 or self.shared_noise < 0:
            raise ValueError("noise levels must be >= 0")
        if self.villages < 1 or self.image_size < 8:
            raise ValueError("need at least one village and 8x8 images")


@dataclass(frozen=True)
class NightCell:
    cell_id: str
    intensity: int
    image: str

    def __post_init__(self):
        if not (0 <= int(self.intensity) <= NIGHT_LEVELS):
            raise ValueError(f"night intensity {self.intensity} outside 0..{NIGHT_LEVELS}")


@dataclass
class World:
    config: SynthConfig
    village_ids: list
    images: np.ndarray  # (n, size, size) uint8
    latent: np.ndarray
    built_up: np.ndarray  # house pixel counts
    development: np.ndarray  # built_up / built_up_scale
    clean_assets: np.ndarray  # noiseless indicators
    census: list
    outliers: np.ndarray  # bool mask of corrupted census rows
    night: list
    grid_rc: np.ndarray  # (n, 2) row/col on the layout grid
    grid_shape: tuple
    districts: list  # district id per village
    district_table: dict  # indicator name -> {district id: value}

    @property
    def n(self) -> int:
        return len(self.village_ids)

    def image_float(self, idx=None) -> np.ndarray:
        imgs = self.images if idx is None else self.images[idx]
        return (imgs.astype(np.float32) / 255.0)[:, None, :, :]

    def right_neighbour(self) -> np.ndarray:
        rows, cols = self.grid_shape
        index = {(int(r), int(c)): i for i, (r, c) in enumerate(self.grid_rc)}
        out = np.empty(self.n, dtype=int)
        for i, (r, c) in enumerate(self.grid_rc):
            j = index.get((int(r), int(c) + 1))
            if j is None:
                j = index[(int(r), 0)]
            out[i] = j
        return out

    def mosaic(self, idx=None) -> np.ndarray:
        """Own tile beside the right-hand neighbour tile, shape (n, 1, size, 2*size)."""
        nb = self.right_neighbour()
        idx = np.arange(self.n) if idx is None else np.asarray(idx)
        pair = np.concatenate([self.images[idx], self.images[nb[idx]]], axis=2)
        return (pair.astype(np.float32) / 255.0)[:, None]


def built_up_scale(size: int) -> float:
    return 0.16 * size * size


def max_houses(size: int) -> int:
    return int(round(built_up_scale(size) / _house_shape(size)[0] / _house_shape(size)[1]))


def _house_shape(size):
    return (2, 3) if size >= 48 else (2, 2)


def _relation(dev, kind):
    if kind == "linear":
        return dev
    return (1.0 - np.exp(-3.0 * dev)) / (1.0 - math.exp(-3.0))


def _village_layout(rng, size, vegetation):
    """Background texture, vegetation mask and an ordered list of house positions."""
    bg = BACKGROUND + rng.normal(0.0, 6.0, (size, size))
    veg = np.zeros((size, size), dtype=bool)
    if vegetation:
        yy, xx = np.mgrid[0:size, 0:size]
        for _ in range(rng.poisson(2.0)):
            cy, cx = rng.uniform(0, size, 2)
            r = rng.uniform(size / 16, size / 5)
            veg |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    hh, hw = _house_shape(size)
    centre = size / 2 + rng.normal(0.0, size / 12, 2)
    pos = np.round(centre + rng.normal(0.0, size / 6, (max_houses(size) + 8, 2))).astype(int)
    pos[:, 0] = np.clip(pos[:, 0], 0, size - hh)
    pos[:, 1] = np.clip(pos[:, 1], 0, size - hw)
    return bg, veg, pos


def render_village(layout, n_houses, size):
    bg, veg, pos = layout
    img = bg.copy()
    img[veg] = VEGETATION + (bg[veg] - BACKGROUND)
    hh, hw = _house_shape(size)
    mask = np.zeros((size, size), dtype=bool)
    for r, c in pos[:n_houses]:
        mask[r:r + hh, c:c + hw] = True
    img[mask] = HOUSE + 0.3 * (bg[mask] - BACKGROUND)
    return np.clip(np.round(img), 0, 255).astype(np.uint8), mask


def _indicator_params(rng):
    lo = np.empty(len(ASSET_TABLE))
    span = np.empty(len(ASSET_TABLE))
    sign = np.empty(len(ASSET_TABLE))
    for k, (name, _, _) in enumerate(ASSET_TABLE):
        s = rng.uniform(35.0, 70.0)
        if name in DEVELOPMENT_NEGATIVE:
            lo[k], sign[k] = rng.uniform(s + 5, 95.0), -1.0
        else:
            lo[k], sign[k] = rng.uniform(2.0, 25.0), 1.0
        span[k] = s
    return lo, span, sign


def _column_weights(rng):
    """Fixed split of each indicator total across its source columns."""
    return [rng.dirichlet(np.full(len(cols), 4.0)) for _, cols, _ in ASSET_TABLE]


def _grid(n, block):
    cols = int(math.ceil(math.sqrt(n)))
    rows = int(math.ceil(n / cols))
    rc = np.array([(i // cols, i % cols) for i in range(n)])
    bcols = int(math.ceil(cols / block))
    district = [f"d{(r // block) * bcols + c // block:04d}" for r, c in rc]
    return rc, (rows, cols), district


def synth_generate(config: SynthConfig) -> World:
    n, size = config.villages, config.image_size
    seed = config.seed
    rc, shape, districts = _grid(n, config.district_block)
    dnames = sorted(set(districts))

    lat_rng = rng_for(seed, "latent")
    dlevel = dict(zip(dnames, lat_rng.uniform(0.0, 1.0, len(dnames))))
    latent = np.array([0.5 * dlevel[d] for d in districts]) + 0.5 * lat_rng.uniform(0.0, 1.0, n)

    img_rng = rng_for(seed, "images")
    images = np.empty((n, size, size), dtype=np.uint8)
    built = np.empty(n)
    mh = max_houses(size)
    for i in range(n):
        layout = _village_layout(img_rng, size, config.vegetation)
        nh = int(round(3 + latent[i] * (mh - 3)))
        images[i], mask = render_village(layout, nh, size)
        built[i] = mask.sum()
    dev = built / built_up_scale(size)

    par_rng = rng_for(seed, "census-params")
    lo, span, sign = _indicator_params(par_rng)
    weights = _column_weights(par_rng)
    g = _relation(dev, config.relation)
    clean = lo + sign * span * g[:, None]

    noise_rng = rng_for(seed, "census-noise")
    gsd = float(np.std(g)) if n > 1 else 0.0
    cols = np.zeros((n, N_COLUMNS))
    shared = noise_rng.standard_normal(n) * config.shared_noise
    for k, (_, src, div) in enumerate(ASSET_TABLE):
        sd_k = span[k] * gsd
        total = div * (clean[:, k] + sign[k] * span[k] * gsd * shared)
        col_sd = config.noise * sd_k * div / math.sqrt(len(src))
        for c, w in zip(src, weights[k]):
            cols[:, c - 1] = w * total + noise_rng.standard_normal(n) * col_sd
    for c in range(1, N_COLUMNS + 1):
        if c in REFERENCED_COLUMNS:
            continue
        if c == 1:
            cols[:, 0] = 100.0  # all households
        elif c % 3 == 0:
            cols[:, c - 1] = 20.0 + 30.0 * g + noise_rng.normal(0.0, 5.0, n)
        elif c % 3 == 1:
            cols[:, c - 1] = noise_rng.uniform(0.0, 50.0, n)
        else:
            cols[:, c - 1] = 60.0 - 25.0 * g + noise_rng.normal(0.0, 5.0, n)

    out_rng = rng_for(seed, "outliers")
    n_out = int(math.floor(config.outlier_fraction * n))
    outliers = np.zeros(n, dtype=bool)
    if n_out:
        idx = out_rng.choice(n, size=n_out, replace=False)
        outliers[idx] = True
        for i in idx:
            for c in REFERENCED_COLUMNS:
                cols[i, c - 1] = out_rng.uniform(0.0, 100.0)

    ids = [f"v{i:05d}" for i in range(n)]
    census = [CensusRow(ids[i], {c + 1: float(cols[i, c]) for c in range(N_COLUMNS)}) for i in range(n)]

    # night light: own built-up plus a share of the right-hand neighbour's
    world = World(config, ids, images, latent, built, dev, clean, census, outliers, [], rc, shape,
                  districts, {})
    nb = world.right_neighbour()
    light = (dev + config.light_spread * dev[nb]) / (1.0 + config.light_spread)
    night_rng = rng_for(seed, "night")
    light = light + night_rng.standard_normal(n) * config.noise * float(np.std(light) if n > 1 else 0.0)
    level = np.clip(np.round(NIGHT_LEVELS * light), 0, NIGHT_LEVELS).astype(int)
    world.night = [NightCell(f"c{i:05d}", int(level[i]), f"images/{ids[i]}.pgm") for i in range(n)]

    world.district_table = _district_indicators(world, dnames, rng_for(seed, "district"))
    return world


DISTRICT_INDICATORS = ("literacy", "sanitation", "immunized", "noise")


def _district_indicators(world, dnames, rng):
    mean_dev = {d: float(np.mean(world.development[[i for i, x in enumerate(world.districts) if x == d]]))
                for d in dnames}
    md = np.array([mean_dev[d] for d in dnames])
    planted = {
        "literacy": 25.0 + 55.0 * np.tanh(2.5 * md),
        "sanitation": 80.0 - 60.0 * md ** 2,
        "immunized": 30.0 + 45.0 * np.sqrt(np.clip(md, 0, None)),
        "noise": 50.0 + 0 * md,
    }
    table = {}
    for name in DISTRICT_INDICATORS:
        vals = planted[name] + rng.normal(0.0, 1.5 if name != "noise" else 10.0, len(dnames))
        table[name] = dict(zip(dnames, vals.tolist()))
    return table


def growth_sequence(size=64, steps=6, seed=0, start=0.1, stop=0.9, vegetation=True) -> np.ndarray:
    """One village imaged over time; each frame keeps every earlier house and adds more."""
    layout = _village_layout(rng_for(seed, "growth"), size, vegetation)
    mh = max_houses(size)
    counts = np.round(3 + np.linspace(start, stop, steps) * (mh - 3)).astype(int)
    return np.stack([render_village(layout, int(k), size)[0] for k in counts])


# -- on-disk world -----------------------------------------------------------

def save_world(world: World, directory) -> dict:
    """Write images (PGM), census/night/layout/district CSVs and a dataset manifest."""
    from .census import write_census_csv

    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for vid, img in zip(world.village_ids, world.images):
        write_pgm(root / "images" / f"{vid}.pgm", img)
    write_census_csv(world.census, root / "census.csv")
    with open(root / "night.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_id", "intensity", "image"])
        for c in world.night:
            w.writerow([c.cell_id, c.intensity, c.image])
    with open(root / "layout.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["village_id", "row", "col", "district_id"])
        for vid, (r, c), d in zip(world.village_ids, world.grid_rc, world.districts):
            w.writerow([vid, int(r), int(c), d])
    with open(root / "truth.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["village_id", "latent", "built_up", "development", "outlier"])
        for i, vid in enumerate(world.village_ids):
            w.writerow([vid, repr(float(world.latent[i])), int(world.built_up[i]),
                        repr(float(world.development[i])), int(world.outliers[i])])
    dnames = sorted(next(iter(world.district_table.values())).keys()) if world.district_table else []
    with open(root / "district_indicators.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["district_id", *world.district_table.keys()])
        for d in dnames:
            w.writerow([d] + [repr(float(world.district_table[k][d])) for k in world.district_table])
    manifest = {
        "kind": "dataset",
        "config": asdict(world.config),
        "images": [f"images/{vid}.pgm" for vid in world.village_ids],
        "village_ids": list(world.village_ids),
        "targets": "census.csv",
        "night": "night.csv",
        "layout": "layout.csv",
        "districts": "district_indicators.csv",
        "split_seed": world.config.seed,
    }
    (root / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_world(directory) -> World:
    from .census import read_census_csv

    root = Path(directory)
    manifest = json.loads((root / "dataset.json").read_text())
    config = SynthConfig(**manifest["config"])
    ids = manifest["village_ids"]
    images = np.stack([read_pgm(root / p) for p in manifest["images"]])
    census = read_census_csv(root / manifest["targets"])
    by_id = {r.village_id: r for r in census}
    census = [by_id[v] for v in ids]
    with open(root / "truth.csv", newline="") as fh:
        truth = list(csv.DictReader(fh))
    latent = np.array([float(t["latent"]) for t in truth])
    built = np.array([float(t["built_up"]) for t in truth])
    dev = np.array([float(t["development"]) for t in truth])
    outliers = np.array([t["outlier"] == "1" for t in truth])
    with open(root / manifest["night"], newline="") as fh:
        night = [NightCell(r["cell_id"], int(r["intensity"]), r["image"]) for r in csv.DictReader(fh)]
    with open(root / manifest["layout"], newline="") as fh:
        lay = list(csv.DictReader(fh))
    rc = np.array([(int(r["row"]), int(r["col"])) for r in lay])
    shape = (int(rc[:, 0].max()) + 1, int(rc[:, 1].max()) + 1)
    districts = [r["district_id"] for r in lay]
    table = {}
    with open(root / manifest["districts"], newline="") as fh:
        for rec in csv.DictReader(fh):
            for k, v in rec.items():
                if k != "district_id":
                    table.setdefault(k, {})[rec["district_id"]] = float(v)
    from .census import aggregate_all
    clean = aggregate_all(census)  # observed values; noiseless ones are not persisted
    return World(config, ids, images, latent, built, dev, clean, census, outliers, night, rc, shape,
                 districts, table)
