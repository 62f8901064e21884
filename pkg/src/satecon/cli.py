"""Command-line entry point: synth, aggregate, train, transfer, analyze, econ.

Every run writes ``manifest.json`` into its output directory with the fully
resolved parameters and seed.  Parameters come from built-in defaults, then
``--config`` (flat ``key = value`` lines, or a previous manifest), then flags.
Exit codes: 0 ok, 1 runtime failure, 2 usage error; failures print one line
``error: <Class>: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .census import (INDICATORS, aggregate_all, correlation_matrix, mahalanobis_filter, write_assets_csv,
                     write_correlation_csv, write_outlier_csv)
from .imageio import write_grid_csv
from .pipeline import (DESK, NIGHT, load_regressor, save_regressor, train_direct, train_nightlight,
                       undersample_skew, untrained_regressor)
from .synth import SynthConfig, growth_sequence, load_world, rng_for, save_world, synth_generate


class UsageError(Exception):
    pass


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text):
    return None if str(text).strip().lower() in ("", "none") else float(text)


# name -> (type, default, help); None default with required=True means the flag must be given
PARAMS = {
    "synth": {
        "villages": (int, 200, "number of villages"),
        "size": (int, 64, "image side in pixels"),
        "relation": (str, "monotone", "image->asset relation: linear or monotone"),
        "noise": (float, 0.1, "census column noise relative to signal spread"),
        "outliers": (float, 0.05, "fraction of corrupted census rows"),
        "shared_noise": (float, 0.0, "census noise shared by all indicators of a village"),
        "light_spread": (float, 0.0, "share of the right neighbour's light in a night cell"),
        "district_block": (int, 3, "villages per district side on the layout grid"),
    },
    "aggregate": {
        "world": (str, None, "world directory"),
        "threshold": (float, 30.0, "Mahalanobis rejection threshold"),
        "estimator": (str, "robust", "location/scatter estimator: robust or classical"),
    },
    "train": {
        "world": (str, None, "world directory"),
        "mode": (str, "direct", "direct (asset vector) or night (night-light intensity)"),
        "reject_outliers": (_bool, False, "drop Mahalanobis outliers from the training split"),
        "mosaic": (_bool, False, "night mode: feed own tile beside the right neighbour"),
        "skew": (_opt_float, None, "night mode: undersample modal cells down to this skewness"),
        "epochs": (int, DESK.epochs, "training epochs"),
        "lr": (_opt_float, None, "base learning rate (default depends on mode)"),
    },
    "transfer": {
        "world": (str, None, "world directory"),
        "model": (str, None, "trained direct-mode model file"),
        "folds": (int, 5, "cross-validation folds"),
        "layers": (int, 1, "head depth: 1 (linear) or 2"),
        "epochs": (int, 150, "head training epochs"),
    },
    "analyze": {
        "world": (str, None, "world directory"),
        "model": (str, None, "trained direct-mode model file"),
        "indicator": (str, "electronics", "indicator to map and occlude"),
        "village": (int, 0, "village index for the occlusion heatmap"),
        "occluder": (int, 16, "occluder side in pixels"),
        "stride": (int, 8, "occluder stride in pixels"),
        "percentile": (float, 90.0, "edge threshold percentile of gradient magnitudes"),
        "steps": (int, 6, "frames in the temporal replay"),
    },
    "econ": {
        "records": (str, "", "record CSV (empty: generate planted records)"),
        "villages": (int, 10000, "planted records to generate when no CSV is given"),
        "spec": (str, "village", "specification for repeated sampling: m1..m4 or village"),
        "sample_size": (int, 3500, "records per repeated-sampling run"),
        "runs": (int, 100, "repeated-sampling runs"),
        "f2": (float, 0.02, "effect size for the power calculation"),
        "alpha": (float, 0.05, "significance level for the power calculation"),
        "power": (float, 0.95, "target power"),
    },
}
REQUIRED = {"aggregate": ("world",), "train": ("world",), "transfer": ("world", "model"),
            "analyze": ("world", "model")}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="top-level seed (default 0)")
    common.add_argument("--config", default=None, help="flat key = value file or a previous manifest.json")
    common.add_argument("--out", default=None, help="output directory")
    parser = _Parser(prog="satecon", description="Satellite imagery to socio-economic indicators.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, params in PARAMS.items():
        p = sub.add_parser(name, parents=[common])
        for key, (_, default, help_) in params.items():
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None,
                           help=f"{help_} (default {default!r})")
    return parser


def read_config(path) -> dict:
    """Flat ``key = value`` text (``#`` comments) or a manifest's ``config`` block."""
    text = Path(path).read_text()
    if str(path).endswith(".json"):
        obj = json.loads(text)
        cfg = dict(obj.get("config", obj))
        if "seed" in obj and "seed" not in cfg:
            cfg["seed"] = obj["seed"]
        return cfg
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def resolve(command: str, args: argparse.Namespace) -> tuple[dict, int]:
    params = PARAMS[command]
    cfg = {k: d for k, (_, d, _) in params.items()}
    seed = 0
    layers = []
    if args.config:
        layers.append(read_config(args.config))
    layers.append({k: getattr(args, k) for k in params if getattr(args, k) is not None})
    for layer in layers:
        for k, v in layer.items():
            if k == "seed":
                seed = int(v)
                continue
            if k not in params:
                raise UsageError(f"unknown parameter {k!r} for {command}")
            conv = params[k][0]
            try:
                cfg[k] = v if v is None else conv(v)
            except ValueError as exc:
                raise UsageError(f"bad value for {k}: {exc}") from exc
    if args.seed is not None:
        seed = args.seed
    for k in REQUIRED.get(command, ()):
        if not cfg.get(k):
            raise UsageError(f"{command} needs --{k}")
    return cfg, seed


def component_seed(seed: int, label: str) -> int:
    return int(rng_for(seed, label).integers(2 ** 31))


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _f(x):
    return repr(float(x))


# -- subcommands -------------------------------------------------------------

def cmd_synth(cfg, seed, out: Path) -> list:
    config = SynthConfig(villages=cfg["villages"], image_size=cfg["size"], relation=cfg["relation"],
                         noise=cfg["noise"], outlier_fraction=cfg["outliers"], seed=component_seed(seed, "synth"),
                         shared_noise=cfg["shared_noise"], light_spread=cfg["light_spread"],
                         district_block=cfg["district_block"])
    save_world(synth_generate(config), out)
    return ["dataset.json", "census.csv", "night.csv", "layout.csv", "truth.csv", "district_indicators.csv"]


def cmd_aggregate(cfg, seed, out: Path) -> list:
    world = load_world(cfg["world"])
    assets = aggregate_all(world.census)
    write_assets_csv(world.village_ids, assets, out / "assets.csv")
    report = mahalanobis_filter(assets, cfg["threshold"], world.village_ids, estimator=cfg["estimator"],
                                seed=component_seed(seed, "mahalanobis"))
    write_outlier_csv(report, out / "outliers.csv")
    write_correlation_csv(correlation_matrix(world.census), out / "correlation.csv")
    _write_json(out / "outlier_summary.json", {"rows": len(report.village_ids), "rejected": int(report.rejected.sum()),
                                               "rejection_fraction": report.rejection_fraction,
                                               "threshold": report.threshold})
    return ["assets.csv", "outliers.csv", "correlation.csv", "outlier_summary.json"]


def cmd_train(cfg, seed, out: Path) -> list:
    world = load_world(cfg["world"])
    s = component_seed(seed, "train")
    if cfg["mode"] == "direct":
        tc = replace(DESK, epochs=cfg["epochs"])
        if cfg["lr"] is not None:
            tc = replace(tc, sgd=replace(tc.sgd, lr=cfg["lr"]))
        run = train_direct(world, cfg["reject_outliers"], tc, seed=s)
        model, curve = run.model, run.curve
        test = run.dataset.test_idx
        clean = test[~world.outliers[test]]
        result = {"test": run.test_report().to_dict(), "clean_test": run.test_report(clean).to_dict(),
                  "train_rows": int(np.sum(run.keep[run.dataset.train_idx])),
                  "rejected_train_rows": int(np.sum(~run.keep[run.dataset.train_idx]))}
    elif cfg["mode"] == "night":
        tc = replace(NIGHT, epochs=cfg["epochs"])
        if cfg["lr"] is not None:
            tc = replace(tc, sgd=replace(tc.sgd, lr=cfg["lr"]))
        cells = world.night
        if cfg["skew"] is not None:
            cells = undersample_skew(cells, cfg["skew"], component_seed(seed, "undersample"))
        model, report, curve = train_nightlight(world, cells, cfg["mosaic"], tc, seed=s)
        result = {"test": report.to_dict(), "cells": len(cells)}
    else:
        raise UsageError(f"unknown mode {cfg['mode']!r}")
    save_regressor(model, out / "model.json")
    _write_csv(out / "loss.csv", ["epoch", "loss"], [[i + 1, _f(v)] for i, v in enumerate(curve)])
    _write_json(out / "r2.json", result)
    return ["model.json", "loss.csv", "r2.json"]


def _model_inputs(model, world):
    w = model.net.input_shape[-1]
    return world.mosaic() if w == 2 * world.config.image_size else world.image_float()


def cmd_transfer(cfg, seed, out: Path) -> list:
    from .transfer import HeadConfig, aggregate_district, district_matrix, extract_features, indicator_sweep, \
        write_sweep

    world = load_world(cfg["world"])
    model = load_regressor(cfg["model"])
    x = _model_inputs(model, world)
    head = HeadConfig(layers=cfg["layers"], epochs=cfg["epochs"], seed=component_seed(seed, "transfer"))
    names = list(world.district_table)
    mapping = dict(zip(world.village_ids, world.districts))
    sources = {
        "trained": extract_features(model, x),
        "raw_assets": aggregate_all(world.census),
        "untrained": extract_features(untrained_regressor(x, model.net.output_shape[0],
                                                          seed=component_seed(seed, "untrained")), x),
    }
    comparison = {}
    sweep = None
    for label, feats in sources.items():
        recs = aggregate_district(world.village_ids, feats, mapping, world.district_table)
        fx, fy = district_matrix(recs, names)
        res = indicator_sweep(fx, dict(zip(names, fy.T)), cfg["folds"], head)
        comparison[label] = dict(zip(res.names, [float(v) for v in res.r2]))
        if label == "trained":
            sweep = res
    write_sweep(sweep, out / "transfer_r2.csv", out / "histogram.json")
    _write_json(out / "feature_comparison.json", comparison)
    return ["transfer_r2.csv", "histogram.json", "feature_comparison.json"]


def cmd_analyze(cfg, seed, out: Path) -> list:
    from .spatial import GeoGrid, detect_edges, occlusion_heatmap, render_choropleth, temporal_track

    world = load_world(cfg["world"])
    model = load_regressor(cfg["model"])
    names = list(INDICATORS) if model.net.output_shape[0] == len(INDICATORS) else ["night"]
    if cfg["indicator"] not in names:
        raise UsageError(f"model has no indicator {cfg['indicator']!r}")
    k = names.index(cfg["indicator"])
    x = _model_inputs(model, world)
    heat = occlusion_heatmap(model.predict, x[cfg["village"]], k, cfg["occluder"], cfg["stride"])
    write_grid_csv(out / "occlusion.csv", heat.values)
    pred = model.predict(x)
    grid = GeoGrid.from_cells(world.grid_rc, pred[:, k], world.grid_shape)
    edges = detect_edges(grid, percentile=cfg["percentile"])
    write_grid_csv(out / "prediction_grid.csv", grid.values)
    write_grid_csv(out / "gradient.csv", edges.magnitude)
    write_grid_csv(out / "edges.csv", edges.mask.astype(float))
    frames = growth_sequence(world.config.image_size, cfg["steps"], component_seed(seed, "growth"))
    fx = frames.astype(np.float32)[:, None] / 255.0
    if x.shape[-1] != fx.shape[-1]:
        fx = np.concatenate([fx, fx], axis=3)
    track = temporal_track(model.predict, fx)
    _write_csv(out / "temporal.csv", ["frame"] + names, [[i] + [_f(v) for v in row] for i, row in enumerate(track)])
    render_choropleth(grid, out / "choropleth.png", title=cfg["indicator"])
    _write_json(out / "analysis.json", {"baseline": heat.baseline, "edge_threshold": edges.threshold,
                                        "edge_cells": int(edges.mask.sum()), "indicator": cfg["indicator"]})
    return ["occlusion.csv", "prediction_grid.csv", "gradient.csv", "edges.csv", "temporal.csv",
            "choropleth.png", "choropleth.json", "analysis.json"]


def cmd_econ(cfg, seed, out: Path) -> list:
    import pandas as pd

    from . import econ

    if cfg["records"]:
        records = pd.read_csv(cfg["records"])
    else:
        records = econ.synth_records(cfg["villages"], component_seed(seed, "econ-records"))
    specs = {s.name: s for s in econ.STANDARD_SPECS + (econ.VILLAGE_SPEC,)}
    if cfg["spec"] not in specs:
        raise UsageError(f"unknown spec {cfg['spec']!r}")
    fits = econ.run_specs(records)
    Path(out / "table.txt").write_text(econ.format_table(fits))
    _write_json(out / "fits.json", {k: f.to_dict() for k, f in fits.items()})
    mc = econ.repeated_sampling(records, specs[cfg["spec"]], cfg["sample_size"], cfg["runs"],
                                component_seed(seed, "econ-sampling"))
    Path(out / "montecarlo.json").write_text(mc.to_json())
    rows = []
    for j, name in enumerate(mc.names):
        try:
            xs, dens = econ.kde(mc.coefs[:, j], points=128)
        except (econ.DegenerateSample, ValueError):
            continue
        rows += [[name, _f(a), _f(b)] for a, b in zip(xs, dens)]
    _write_csv(out / "kde.csv", ["variable", "x", "density"], rows)
    ps = econ.PowerSpec(cfg["f2"], cfg["alpha"], cfg["power"], len(specs[cfg["spec"]].regressors))
    _write_json(out / "power.json", {"f2": ps.f2, "alpha": ps.alpha, "power": ps.power,
                                     "predictors": ps.predictors, "sample_size": econ.power_sample_size(ps)})
    return ["table.txt", "fits.json", "montecarlo.json", "kde.csv", "power.json"]


COMMANDS = {"synth": cmd_synth, "aggregate": cmd_aggregate, "train": cmd_train, "transfer": cmd_transfer,
            "analyze": cmd_analyze, "econ": cmd_econ}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg, seed = resolve(args.command, args)
    except UsageError as exc:
        print(f"error: UsageError: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out or f"{args.command}_out")
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = COMMANDS[args.command](cfg, seed, out)
        manifest = {"subcommand": args.command, "seed": seed, "config": cfg, "version": __version__,
                    "outputs": {name: _sha256(out / name) for name in written}}
        _write_json(out / "manifest.json", manifest)
    except UsageError as exc:
        print(f"error: UsageError: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
