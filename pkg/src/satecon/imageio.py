"""8-bit grayscale PGM rasters and CSV grids."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


def write_pgm(path, image) -> None:
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {img.shape}")
    if img.dtype != np.uint8:
        img = np.clip(np.round(img), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P5" or int(fields[3]) != 255:
        raise ValueError(f"{path}: only binary 8-bit PGM is supported")
    w, h = int(fields[1]), int(fields[2])
    pos += 1
    return np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w).copy()


def to_uint8(values, lo=None, hi=None) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    finite = np.isfinite(v)
    lo = np.nanmin(np.where(finite, v, np.nan)) if lo is None else lo
    hi = np.nanmax(np.where(finite, v, np.nan)) if hi is None else hi
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    out = np.where(finite, (v - lo) * scale, 0.0)
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def write_grid_csv(path, grid) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(grid):
            w.writerow(["" if not np.isfinite(v) else repr(float(v)) for v in row])


def read_grid_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(v) if v != "" else np.nan for v in row] for row in csv.reader(fh)])
