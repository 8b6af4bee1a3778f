"""Command-line entry point: ``glaciermap <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import geotiff
from .config import ConfigError, RunConfig, merge_dataclass
from .dataset import DatasetError, SynthSpec, load_manifest, synth_dataset, write_manifest
from .model import CheckpointError
from .uncertainty import CalibrationError

log = logging.getLogger("glaciermap")

TRACKS = ("OPT_DEM", "OPT_DEM_THERMAL", "OPT_DEM_INSAR")


class UsageError(ValueError):
    pass


class JsonFormatter(logging.Formatter):
    def format(self, record):
        doc = {"level": record.levelname.lower(), "logger": record.name, "msg": record.getMessage()}
        doc.update(getattr(record, "fields", {}))
        return json.dumps(doc)


def _setup_logging(level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(getattr(logging, level.upper()))


def emit(event: str, **fields) -> None:
    """One machine-readable JSON line on stdout."""
    print(json.dumps({"event": event, **fields}, default=_jsonable), flush=True)


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, Path):
        return str(v)
    raise TypeError(type(v))


def _csv_list(text):
    return [s.strip() for s in text.split(",") if s.strip()] if text else None


def _ints(text):
    return tuple(int(v) for v in _csv_list(text)) if text else None


# --------------------------------------------------------------------------
# shared loaders

def _run(args):
    cfg = RunConfig.from_file(args.config)
    seed = args.seed if args.seed is not None else cfg.seed
    out = Path(args.out or cfg.output_dir or "run")
    out.mkdir(parents=True, exist_ok=True)
    return cfg, seed, out


def _model_config(cfg, args, **extra):
    from .model import ModelConfig

    section = cfg.section("model")
    preset = section.pop("preset", None) or getattr(args, "preset", None) or "toy"
    base = asdict(ModelConfig.toy()) if preset == "toy" else {}
    if preset not in ("toy", "default"):
        raise ConfigError(f"unknown model preset {preset!r}")
    base.update(section)
    return merge_dataclass(ModelConfig, base, extra, "model")


def _train_config(cfg, args, seed):
    from .training import TrainConfig

    base = asdict(TrainConfig.desk())
    base.update(cfg.section("train"))
    return merge_dataclass(TrainConfig, base, {
        "cycles": _ints(getattr(args, "cycles", None)),
        "steps_per_epoch": getattr(args, "steps_per_epoch", None),
        "batch_size": getattr(args, "batch_size", None),
        "lr_init": getattr(args, "lr", None),
        "seed": seed,
    }, "train")


def _bias_config(cfg, args):
    from .location import BiasOptConfig

    return merge_dataclass(BiasOptConfig, cfg.section("bias_opt"), {
        "lr": getattr(args, "bias_lr", None),
        "max_epochs": getattr(args, "bias_epochs", None),
    }, "bias_opt")


def _tiles(manifest, split=None, ids=None):
    refs = load_manifest(manifest)
    if not refs:
        raise DatasetError(f"{manifest}: no tiles")
    if ids:
        wanted = set(ids)
        refs = [r for r in refs if r.id in wanted]
        missing = wanted - {r.id for r in refs}
        if missing:
            raise DatasetError(f"tiles not in manifest: {sorted(missing)}")
    elif split and split != "all":
        refs = [r for r in refs if r.split == split]
        if not refs:
            raise DatasetError(f"{manifest}: no tiles in split {split!r}")
    return [r.load() for r in refs]


def _load_model(path):
    from .model import load_state

    if not path:
        raise UsageError("--model is required")
    return load_state(path)


def _load_calibrator(path, required=False):
    from .uncertainty import Calibrator

    if not path:
        if required:
            raise UsageError("calibrate first: no calibrator file given")
        return None
    if not Path(path).is_file():
        raise UsageError(f"calibrate first: no calibrator file at {path}")
    return Calibrator.load(path)


# --------------------------------------------------------------------------
# subcommands

def cmd_synth(args):
    from .dataset import load_synth_spec

    cfg, seed, out = _run(args)
    base = load_synth_spec(args.spec) if args.spec else merge_dataclass(SynthSpec, cfg.section("synth"), name="synth")
    base = replace(base, **{k: v for k, v in {
        "size": args.size,
        "n_blobs": args.n_blobs,
        "debris_fraction": args.debris_fraction,
        "noise": args.noise,
    }.items() if v is not None})
    if args.no_thermal:
        base = replace(base, thermal=False)
    if args.no_sar:
        base = replace(base, sar=False)
    regions = _csv_list(args.regions) or ["ALP"]
    tiles = synth_dataset(args.tiles, seed, regions, base)
    manifest = write_manifest(tiles, out)
    cfg.snapshot(out / "config.toml", synth=base, tiles=args.tiles, regions=regions, seed=seed)
    emit("synth", manifest=manifest, tiles=len(tiles),
         splits={s: sum(t.split == s for t in tiles) for s in ("train", "val", "test")})


def cmd_train(args):
    from .model import build_model, load_state, save_state
    from .training import train

    cfg, seed, out = _run(args)
    tcfg = _train_config(cfg, args, seed)
    regions = _csv_list(args.regions)
    if args.strategy in ("regional", "finetune") and not regions:
        raise UsageError(f"--regions is required for strategy {args.strategy}")
    if args.strategy == "finetune":
        if not args.init:
            raise UsageError("finetune needs --init with a pretrained checkpoint")
        model = load_state(args.init)
        mcfg = model.config
    else:
        mcfg = _model_config(cfg, args, track=args.track, location_mode=args.location_mode, seed=seed)
        model = build_model(mcfg)
    tiles = _tiles(args.data)
    model, history = train(model, tiles, args.strategy, tcfg, regions=regions, history_path=out / "history.csv")
    save_state(model, out / "model.ckpt")
    cfg.snapshot(out / "config.toml", model=mcfg, train=tcfg, strategy=args.strategy,
                 regions=regions or [], data=str(args.data))
    best = max(history, key=lambda r: r["val_iou"])
    emit("train", checkpoint=out / "model.ckpt", strategy=args.strategy, track=mcfg.track,
         epochs=len(history), best_val_iou=best["val_iou"])


def cmd_predict(args):
    from .inference import mask_to_geojson, optimize_scene_region, predict_scene
    from .location import write_region_vector

    cfg, seed, out = _run(args)
    model = _load_model(args.model)
    calibrator = _load_calibrator(args.calibrator)
    bias_cfg = _bias_config(cfg, args)
    if args.bias_optimize and model.config.location_mode != "region":
        raise UsageError("--bias-optimize needs a model trained with region encoding")
    tiles = _tiles(args.scene, args.split, _csv_list(args.tiles))
    summary = []
    for t in tiles:
        loc = None
        if args.bias_optimize:
            loc = optimize_scene_region(model, t, bias_cfg, args.window)
            write_region_vector(loc, out / f"{t.id}_region.json")
        res = predict_scene(model, t, args.window, args.overlap, args.mc_passes, seed, loc, calibrator,
                            args.weighting)
        ref = next(iter(t.rasters.values()))
        geotiff.write_geotiff(out / f"{t.id}_mask.tif", res.mask, ref.origin, ref.pixel_size, ref.crs_id)
        conf = [res.confidence] + ([res.calibrated_confidence] if calibrator is not None else [])
        geotiff.write_geotiff(out / f"{t.id}_confidence.tif", np.stack(conf).astype(np.float32),
                              ref.origin, ref.pixel_size, ref.crs_id)
        gj = mask_to_geojson(res.mask == 1, ref.origin, ref.pixel_size, {"tile": t.id})
        (out / f"{t.id}_outlines.geojson").write_text(json.dumps(gj))
        summary.append({"tile_id": t.id, "region": t.region.name, "model": str(args.model), **res.provenance})
        log.info("predicted %s", t.id, extra={"fields": {"tile": t.id, "glacier_px": int(res.mask.sum())}})
    (out / "summary.json").write_text(json.dumps({"tiles": summary}, indent=2))
    cfg.snapshot(out / "config.toml", bias_opt=bias_cfg, model=str(args.model), scene=str(args.scene),
                 window=args.window or model.config.patch_size_px, overlap=args.overlap,
                 mc_passes=args.mc_passes, bias_optimize=bool(args.bias_optimize))
    emit("predict", tiles=len(tiles), out=out)


def cmd_evaluate(args):
    from .iou_estimation import ConfusionCounts
    from .inference import evaluate_iou

    cfg, seed, out = _run(args)
    pred_dir = Path(args.pred)
    summary = json.loads((pred_dir / "summary.json").read_text())
    ids = [row["tile_id"] for row in summary["tiles"]]
    tiles = {t.id: t for t in _tiles(args.data, "all", ids)}
    rows, tp, fp, fn = [], 0, 0, 0
    for tid in ids:
        mask, _ = geotiff.read_geotiff(pred_dir / f"{tid}_mask.tif")
        ref = tiles[tid].label
        m = evaluate_iou(mask[0], ref)
        c = ConfusionCounts.from_masks(mask[0] == 1, ref == 1)
        tp, fp, fn = tp + c.tp, fp + c.fp, fn + c.fn
        rows.append({"tile_id": tid, "region": tiles[tid].region.name, **m})
    pooled = tp / (tp + fp + fn) if tp + fp + fn else float("nan")
    doc = {"glacier_iou": pooled, "tiles": rows}
    (out / "evaluation.json").write_text(json.dumps(doc, indent=2))
    cfg.snapshot(out / "config.toml", pred=str(pred_dir), data=str(args.data))
    emit("evaluate", glacier_iou=pooled, tiles=len(rows))


def _confidence_pairs(model, tiles, args, seed, calibrator=None):
    from .inference import predict_scene

    confs, correct = [], []
    for t in tiles:
        res = predict_scene(model, t, args.window, args.overlap, args.mc_passes, seed, calibrator=calibrator)
        c = res.calibrated_confidence if calibrator is not None else res.confidence
        confs.append(c.ravel())
        correct.append((res.mask == t.label).ravel())
    return np.concatenate(confs), np.concatenate(correct)


def cmd_calibrate(args):
    from .uncertainty import ece, fit_calibrator, plot_reliability, reliability_data, write_reliability_csv

    cfg, seed, out = _run(args)
    model = _load_model(args.model)
    tiles = _tiles(args.data, args.split)
    conf, correct = _confidence_pairs(model, tiles, args, seed)
    cal = fit_calibrator(conf, correct, bins=args.bins, monotone=args.monotone)
    cal.save(out / "calibrator.json")
    calibrated = cal(conf)
    pre, post = ece(conf, correct, args.bins), ece(calibrated, correct, args.bins)
    for name, c, e in (("raw", conf, pre), ("calibrated", calibrated, post)):
        rows = reliability_data(c, correct, args.bins)
        write_reliability_csv(rows, out / f"reliability_{name}.csv")
        plot_reliability(rows, out / f"reliability_{name}.png", name, e)
    metrics = {"ece_raw": pre, "ece_calibrated": post, "pixels": int(conf.size), "mc_passes": args.mc_passes}
    (out / "calibration.json").write_text(json.dumps(metrics, indent=2))
    cfg.snapshot(out / "config.toml", model=str(args.model), data=str(args.data), split=args.split,
                 bins=args.bins, mc_passes=args.mc_passes)
    emit("calibrate", calibrator=out / "calibrator.json", **metrics)


def cmd_estimate_iou(args):
    from .inference import predict_scene
    from .iou_estimation import (ConfusionCounts, estimate_iou, evaluate_estimator, iou_from_counts,
                                 plot_estimates, write_estimates_csv)

    cfg, seed, out = _run(args)
    calibrator = _load_calibrator(args.calibrator, required=True)
    model = _load_model(args.model)
    tiles = _tiles(args.data, args.split)
    rows = []
    for t in tiles:
        res = predict_scene(model, t, args.window, args.overlap, args.mc_passes, seed, calibrator=calibrator)
        n_p = int(np.count_nonzero(res.mask == 1))
        n_n = int(res.mask.size - n_p)
        mean_conf = float(res.calibrated_confidence.mean())
        row = {"tile_id": t.id, "mean_conf": mean_conf, "n_p": n_p, "n_n": n_n,
               "est_iou": estimate_iou(mean_conf, n_p, n_n), "actual_iou": None}
        try:
            row["actual_iou"] = iou_from_counts(ConfusionCounts.from_masks(res.mask == 1, t.label == 1))
        except ValueError:
            pass
        rows.append(row)
    write_estimates_csv(rows, out / "iou_estimates.csv")
    plot_estimates(rows, out / "iou_estimates.png")
    pairs = [(r["est_iou"], r["actual_iou"]) for r in rows if r["actual_iou"] is not None]
    report = None
    if len(pairs) >= 3:
        try:
            report = evaluate_estimator(pairs, seed=seed).as_dict()
        except ValueError as exc:
            log.warning("estimator report skipped: %s", exc)
    (out / "iou_report.json").write_text(json.dumps(report, indent=2))
    cfg.snapshot(out / "config.toml", model=str(args.model), calibrator=str(args.calibrator), data=str(args.data))
    emit("estimate-iou", tiles=len(rows), report=report)


def cmd_divides(args):
    from .ice_divides import (DEMGrid, DivideParams, calibrate_params, delineate_divides, divide_distance,
                              read_lines_geojson, two_cone_scene, write_divides_geojson, write_metrics)

    cfg, seed, out = _run(args)
    params = merge_dataclass(DivideParams, cfg.section("divides"), {
        "gutter_depth": args.gutter_depth,
        "buffer_radius": args.buffer_radius,
        "min_watershed_area": args.min_watershed_area,
        "smoothing_window": args.smoothing_window,
    }, "divides")
    crs = None
    if args.two_cone:
        dem, mask, reference = two_cone_scene(size=args.size)
        geotiff.write_geotiff(out / "dem.tif", dem.elevation.astype(np.float32), (0, 0), dem.pixel_size)
        geotiff.write_geotiff(out / "mask.tif", mask.astype(np.uint8), (0, 0), dem.pixel_size)
        write_divides_geojson(reference, out / "reference.geojson")
    else:
        if not (args.dem and args.mask):
            raise UsageError("--dem and --mask are required (or use --two-cone)")
        z, meta = geotiff.read_geotiff(args.dem)
        m, _ = geotiff.read_geotiff(args.mask)
        nodata = None if meta["nodata"] is None else z[0] == meta["nodata"]
        dem = DEMGrid(z[0].astype(np.float64), meta["pixel_size"], nodata, meta["origin"])
        mask = m[0] > 0
        crs = meta["crs_id"]
        reference = read_lines_geojson(args.reference) if args.reference else None
    if args.calibrate:
        if reference is None:
            raise UsageError("--calibrate needs --reference divides")
        params = calibrate_params(dem, mask, reference, args.budget, seed, log_path=out / "calibration_log.csv")
    net = delineate_divides(dem, mask, params)
    write_divides_geojson(net, out / "divides.geojson", crs)
    geotiff.write_geotiff(out / "watersheds.tif", net.watershed_labels, dem.origin, dem.pixel_size)
    result = {"divides": len(net.polylines), "params": asdict(params)}
    if reference is not None and net.polylines:
        metrics = divide_distance(net, reference)
        write_metrics(metrics, out / "metrics.json")
        result.update(rc_to_rf_m=metrics[0], rf_to_rc_m=metrics[1], average_m=metrics[2])
    cfg.snapshot(out / "config.toml", divides=params, budget=args.budget, calibrate=bool(args.calibrate))
    emit("divides", **result)


def cmd_compare(args):
    from .inference import comparison_harness, write_comparison_csv

    cfg, seed, out = _run(args)
    configs = []
    for item in _csv_list(args.configs) or []:
        strategy, _, track = item.partition(":")
        configs.append((strategy, track or "OPT_DEM"))
    if not configs:
        raise UsageError("--configs needs at least one strategy:track pair")
    mcfg = _model_config(cfg, args, seed=seed)
    tcfg = _train_config(cfg, args, seed)
    tiles = _tiles(args.data)
    table = comparison_harness(configs, tiles, seed, mcfg, tcfg, _bias_config(cfg, args), args.overlap)
    labels = [f"{s}/{t}" for s, t in configs]
    write_comparison_csv(table, out / "comparison.csv", labels)
    (out / "summary.json").write_text(json.dumps({"configs": labels, "table": table}, indent=2))
    cfg.snapshot(out / "config.toml", model=mcfg, train=tcfg, configs=[list(c) for c in configs])
    emit("compare", table=table, csv=out / "comparison.csv")


def cmd_plot_reliability(args):
    import csv

    from .uncertainty import ReliabilityBin, plot_reliability

    with open(args.csv, newline="") as fh:
        rows = [ReliabilityBin(*(float(r[k]) for k in ("bin_center", "mean_conf", "accuracy", "fraction")))
                for r in csv.DictReader(fh)]
    if not rows:
        raise UsageError(f"{args.csv}: no reliability bins")
    ece_value = sum(r.fraction * abs(r.accuracy - r.mean_conf) for r in rows)
    out = Path(args.out)
    plot_reliability(rows, out, args.title, ece_value)
    emit("plot-reliability", png=out, ece=ece_value)


# --------------------------------------------------------------------------
# parser

def _common(p, out=True):
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--seed", type=int)
    if out:
        p.add_argument("--out", help="output run directory")


def _scene_opts(p):
    p.add_argument("--window", type=int, help="window size in px (default: model patch size)")
    p.add_argument("--overlap", type=int, default=0)
    p.add_argument("--mc-passes", type=int, default=0, help="0 = deterministic softmax")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="glaciermap", description="Glacier mapping toolkit")
    parser.add_argument("--log-level", default="warning", choices=["debug", "info", "warning", "error"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic tile dataset")
    _common(p)
    p.add_argument("--tiles", type=int, default=12)
    p.add_argument("--regions", help="comma-separated region codes (default ALP)")
    p.add_argument("--size", type=int)
    p.add_argument("--n-blobs", type=int)
    p.add_argument("--debris-fraction", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--no-thermal", action="store_true")
    p.add_argument("--no-sar", action="store_true")
    p.add_argument("--spec", help="TOML synthetic-scene spec")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a segmentation model")
    _common(p)
    p.add_argument("--data", required=True, help="dataset manifest.json")
    p.add_argument("--strategy", choices=["global", "regional", "finetune"], default="global")
    p.add_argument("--track", choices=TRACKS, default="OPT_DEM")
    p.add_argument("--location-mode", choices=["none", "region", "coord"])
    p.add_argument("--regions", help="comma-separated regions for regional/finetune")
    p.add_argument("--init", help="pretrained checkpoint (finetune)")
    p.add_argument("--preset", choices=["toy", "default"])
    p.add_argument("--cycles", help="comma-separated epochs per restart cycle")
    p.add_argument("--steps-per-epoch", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict glacier masks for scenes")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--scene", required=True, help="manifest.json holding the scenes")
    p.add_argument("--split", default="test", help="train/val/test/all (ignored with --tiles)")
    p.add_argument("--tiles", help="comma-separated tile ids")
    _scene_opts(p)
    p.add_argument("--weighting", choices=["uniform", "cosine"], default="uniform")
    p.add_argument("--calibrator")
    p.add_argument("--bias-optimize", action="store_true")
    p.add_argument("--bias-lr", type=float)
    p.add_argument("--bias-epochs", type=int)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="IoU of predicted masks against labels")
    _common(p)
    p.add_argument("--pred", required=True, help="predict output directory")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("calibrate", help="fit a confidence calibrator on validation tiles")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--bins", type=int, default=100)
    p.add_argument("--monotone", action="store_true")
    _scene_opts(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("estimate-iou", help="reference-free IoU estimates from calibrated confidence")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--calibrator")
    p.add_argument("--split", default="test")
    _scene_opts(p)
    p.set_defaults(func=cmd_estimate_iou)

    p = sub.add_parser("divides", help="delineate ice divides from a DEM and glacier mask")
    _common(p)
    p.add_argument("--dem")
    p.add_argument("--mask")
    p.add_argument("--reference", help="reference divides GeoJSON")
    p.add_argument("--two-cone", action="store_true", help="use the synthetic two-cone scene")
    p.add_argument("--size", type=int, default=64, help="two-cone grid size")
    p.add_argument("--calibrate", action="store_true")
    p.add_argument("--budget", type=int, default=50)
    p.add_argument("--gutter-depth", type=float)
    p.add_argument("--buffer-radius", type=int)
    p.add_argument("--min-watershed-area", type=int)
    p.add_argument("--smoothing-window", type=int)
    p.set_defaults(func=cmd_divides)

    p = sub.add_parser("compare", help="strategy/track comparison table")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--configs", required=True, help="e.g. global:OPT_DEM,regional:OPT_DEM")
    p.add_argument("--cycles")
    p.add_argument("--steps-per-epoch", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--overlap", type=int, default=0)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("plot-reliability", help="render a reliability CSV as PNG")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--title", default="")
    p.set_defaults(func=cmd_plot_reliability)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.log_level)
    try:
        args.func(args)
    except (UsageError, ConfigError, DatasetError, CheckpointError, CalibrationError,
            FileNotFoundError, ValueError) as exc:
        print(f"glaciermap {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
