"""Occlusion heatmaps, edge alerts on indicator grids, temporal replay and choropleths."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nncore import InputError, Network, fc, forward, init_network


@dataclass
class GeoGrid:
    values: np.ndarray  # (height, width)
    mask: np.ndarray | None = None  # True where a value is present

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise InputError("grid values must be 2-D")
        if self.mask is None:
            self.mask = np.isfinite(self.values)
        else:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.values.shape:
                raise InputError("mask shape differs from grid shape")
            if not np.all(np.isfinite(self.values[self.mask])):
                raise InputError("grid has non-finite values under its mask")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_cells(cls, rc, values, shape):
        v = np.full(shape, np.nan)
        rc = np.asarray(rc)
        v[rc[:, 0], rc[:, 1]] = values
        return cls(v)


# -- occlusion ---------------------------------------------------------------

@dataclass
class OcclusionHeatmap:
    indicator: int
    occluder: int
    stride: int
    fill: float
    values: np.ndarray
    baseline: float

    @property
    def delta(self) -> np.ndarray:
        return self.values - self.baseline


def mean_pixel_net(input_shape) -> Network:
    """Reference network whose single output is the mean input pixel."""
    n = int(np.prod(input_shape))
    net = init_network([fc(n, 1)], 0, tuple(input_shape))
    net.weights[0][:] = 1.0 / n
    return net


def net_predictor(net: Network):
    return lambda batch: forward(net, np.asarray(batch, dtype=net.dtype))


def placements(extent: int, occluder: int, stride: int) -> list[int]:
    """Top-left offsets along one axis; the last one is clamped flush to the border."""
    count = math.ceil((extent - occluder) / stride) + 1
    return [min(i * stride, extent - occluder) for i in range(count)]


def occlusion_heatmap(predict, image, indicator=0, occluder=16, stride=8, fill=None,
                      batch=64) -> OcclusionHeatmap:
    """Slide a square patch of ``fill`` over the image and record one output of ``predict``.

    ``predict`` maps a (n, C, H, W) batch to (n, outputs).  ``fill`` defaults
    to the image mean.  The input image is never modified.
    """
    img = np.array(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    c, h, w = img.shape
    if occluder > h or occluder > w:
        raise InputError(f"occluder {occluder} larger than image {h}x{w}")
    if stride < 1:
        raise InputError("stride must be >= 1")
    fill = float(img.mean()) if fill is None else float(fill)
    rows, cols = placements(h, occluder, stride), placements(w, occluder, stride)
    spots = [(r, q) for r in rows for q in cols]
    out = np.empty(len(spots))
    for s in range(0, len(spots), batch):
        chunk = spots[s:s + batch]
        stack = np.repeat(img[None], len(chunk), axis=0)
        for j, (r, q) in enumerate(chunk):
            stack[j, :, r:r + occluder, q:q + occluder] = fill
        out[s:s + len(chunk)] = np.asarray(predict(stack))[:, indicator]
    base = float(np.asarray(predict(img[None]))[0, indicator])
    return OcclusionHeatmap(indicator, occluder, stride, fill, out.reshape(len(rows), len(cols)), base)


# -- edges -------------------------------------------------------------------

@dataclass
class EdgeMap:
    magnitude: np.ndarray  # NaN where the cell is missing
    mask: np.ndarray
    threshold: float


def _axis_gradient(v, m, axis):
    """Central difference where both neighbours exist, one-sided where only one does, else 0."""
    v = np.moveaxis(v, axis, 0)
    m = np.moveaxis(m, axis, 0)
    g = np.zeros_like(v)
    n = v.shape[0]
    if n < 2:
        return np.moveaxis(g, 0, axis)
    prev_ok = np.zeros_like(m)
    next_ok = np.zeros_like(m)
    prev_ok[1:] = m[:-1]
    next_ok[:-1] = m[1:]
    vp = np.zeros_like(v)
    vn = np.zeros_like(v)
    vp[1:] = v[:-1]
    vn[:-1] = v[1:]
    both = prev_ok & next_ok
    only_next = next_ok & ~prev_ok
    only_prev = prev_ok & ~next_ok
    g[both] = (vn[both] - vp[both]) / 2.0
    g[only_next] = vn[only_next] - v[only_next]
    g[only_prev] = v[only_prev] - vp[only_prev]
    return np.moveaxis(g, 0, axis)


def gradient_magnitude(grid: GeoGrid) -> np.ndarray:
    v = np.where(grid.mask, grid.values, 0.0)
    gy = _axis_gradient(v, grid.mask, 0)
    gx = _axis_gradient(v, grid.mask, 1)
    mag = np.hypot(gx, gy)
    mag[~grid.mask] = np.nan
    return mag


def detect_edges(grid: GeoGrid, threshold=None, percentile=90.0) -> EdgeMap:
    """Finite-difference gradient magnitude, flagged where it exceeds the threshold.

    A fixed ``threshold`` wins; otherwise the ``percentile`` of the finite
    magnitudes is used.  Missing cells are never flagged.
    """
    if grid.height < 2 or grid.width < 2:
        raise InputError("edge detection needs at least a 2x2 grid")
    if not grid.mask.any():
        raise InputError("grid has no present cells")
    mag = gradient_magnitude(grid)
    finite = mag[np.isfinite(mag)]
    thr = float(threshold) if threshold is not None else float(np.percentile(finite, percentile))
    edges = np.zeros(mag.shape, dtype=bool)
    ok = np.isfinite(mag)
    edges[ok] = mag[ok] > thr
    return EdgeMap(mag, edges, thr)


# -- temporal replay ---------------------------------------------------------

def temporal_track(predict, images) -> np.ndarray:
    """One independent prediction per frame, in input order: (frames, outputs)."""
    imgs = [np.asarray(i, dtype=np.float32) for i in images]
    if len(imgs) < 2:
        raise InputError("temporal tracking needs at least two images")
    shape = imgs[0].shape
    for k, i in enumerate(imgs):
        if i.shape != shape:
            raise InputError(f"frame {k} has shape {i.shape}, expected {shape}")
    stack = np.stack(imgs)
    if stack.ndim == 3:
        stack = stack[:, None]
    return np.asarray(predict(stack))


# -- choropleths -------------------------------------------------------------

DEFAULT_PALETTE = (
    (68, 1, 84), (59, 82, 139), (33, 145, 140), (94, 201, 98), (253, 231, 37),
)
MISSING_COLOR = (255, 255, 255)


def palette_index(values, lo, hi, n_colors) -> np.ndarray:
    if hi <= lo:
        return np.zeros(np.shape(values), dtype=int)
    t = (np.asarray(values, dtype=float) - lo) / (hi - lo)
    return np.clip(np.floor(t * n_colors), 0, n_colors - 1).astype(int)


def choropleth_raster(grid: GeoGrid, palette=DEFAULT_PALETTE, lo=None, hi=None, cell=1,
                      missing=MISSING_COLOR) -> np.ndarray:
    """(H*cell, W*cell, 3) uint8 raster; each cell gets the palette bin of its value."""
    present = grid.values[grid.mask]
    lo = float(present.min()) if lo is None and present.size else (0.0 if lo is None else lo)
    hi = float(present.max()) if hi is None and present.size else (1.0 if hi is None else hi)
    pal = np.asarray(palette, dtype=np.uint8)
    idx = palette_index(np.where(grid.mask, grid.values, lo), lo, hi, len(pal))
    rgb = pal[idx]
    rgb[~grid.mask] = missing
    if cell > 1:
        rgb = np.repeat(np.repeat(rgb, cell, axis=0), cell, axis=1)
    return rgb


def render_choropleth(grid: GeoGrid, path, palette=DEFAULT_PALETTE, lo=None, hi=None, cell=8,
                      title="") -> dict:
    """Write a PNG plus a ``.json`` legend sidecar; returns the legend."""
    from PIL import Image

    path = Path(path)
    present = grid.values[grid.mask]
    lo = float(present.min()) if lo is None else float(lo)
    hi = float(present.max()) if hi is None else float(hi)
    rgb = choropleth_raster(grid, palette, lo, hi, cell)
    try:
        Image.fromarray(rgb, "RGB").save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write choropleth to {path}: {exc}") from exc
    n = len(palette)
    legend = {
        "title": title,
        "missing_color": list(MISSING_COLOR),
        "bins": [{"lo": lo + (hi - lo) * i / n, "hi": lo + (hi - lo) * (i + 1) / n, "color": list(palette[i])}
                 for i in range(n)],
    }
    path.with_suffix(".json").write_text(json.dumps(legend, indent=2, sort_keys=True) + "\n")
    return legend
