"""District-level transfer: trained vs raw-asset vs untrained features, mean k-fold R2 per target."""

import argparse

from satecon.census import INDICATORS, aggregate_all
from satecon.pipeline import train_direct, untrained_regressor
from satecon.synth import DISTRICT_INDICATORS, SynthConfig, synth_generate
from satecon.transfer import HeadConfig, aggregate_district, crossval, district_matrix, extract_features


def scores(seed, villages, layers, folds):
    world = synth_generate(SynthConfig(villages=villages, relation="monotone", noise=0.3, shared_noise=1.0,
                                       district_block=2, seed=200 + seed))
    run = train_direct(world)
    x = world.image_float()
    sources = {
        "trained": extract_features(run.model, x),
        "raw": aggregate_all(world.census),
        "untrained": extract_features(untrained_regressor(x, len(INDICATORS), seed=seed), x),
    }
    mapping = dict(zip(world.village_ids, world.districts))
    out = {}
    for label, feats in sources.items():
        recs = aggregate_district(world.village_ids, feats, mapping, world.district_table)
        fx, fy = district_matrix(recs, list(DISTRICT_INDICATORS))
        out[label] = [crossval(fx, fy[:, j], folds, HeadConfig(layers=layers)).mean
                      for j in range(len(DISTRICT_INDICATORS))]
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--villages", type=int, default=1200)
    ap.add_argument("--layers", type=int, default=1)
    ap.add_argument("--folds", type=int, default=5)
    args = ap.parse_args()
    print(f"{'seed':>4} {'features':<10}" + "".join(f"{n:>12}" for n in DISTRICT_INDICATORS))
    for s in range(args.seeds):
        for label, row in scores(s, args.villages, args.layers, args.folds).items():
            print(f"{s:>4} {label:<10}" + "".join(f"{v:>12.3f}" for v in row))


if __name__ == "__main__":
    main()
