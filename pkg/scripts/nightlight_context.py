"""Night-light regression: input context size, right-neighbour mosaic and skew undersampling."""

import argparse

import numpy as np

from satecon.pipeline import (CONTEXT_SIZES, NIGHT, Dataset, UnreachableTarget, crop_context, evaluate,
                              fit_regressor, skewness, split, train_nightlight, undersample_skew)
from satecon.synth import SynthConfig, synth_generate


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--villages", type=int, default=1000)
    ap.add_argument("--light-spread", type=float, default=1.0)
    ap.add_argument("--seed", type=int, default=22)
    args = ap.parse_args()
    world = synth_generate(SynthConfig(villages=args.villages, noise=0.1, light_spread=args.light_spread,
                                       seed=args.seed))
    y = np.array([c.intensity for c in world.night], dtype=float)[:, None]
    for size in CONTEXT_SIZES:
        ds = split(Dataset(crop_context(world.image_float(), size), y), seed=args.seed)
        model, _ = fit_regressor(ds.train.x, ds.train.y, NIGHT, args.seed)
        print(f"context {size:>2}px: R2 {evaluate(model, ds.test.x, ds.test.y).overall:.3f}")
    _, mosaic, _ = train_nightlight(world, mosaic=True)
    print(f"mosaic (own + right neighbour): R2 {mosaic.overall:.3f}")
    print(f"night intensity skew {skewness(y):.2f}")
    try:
        cells = undersample_skew(world.night, 0.4, seed=0)
    except UnreachableTarget as exc:
        print(f"undersampling: {exc} (best {exc.achieved:.2f})")
        return
    _, rep, _ = train_nightlight(world, cells)
    print(f"after undersampling to skew 0.4 ({len(cells)} cells): R2 {rep.overall:.3f}")


if __name__ == "__main__":
    main()
