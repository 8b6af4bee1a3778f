"""Scene-scale sliding-window prediction, IoU evaluation and the
strategy/data-track comparison harness."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .dataset import Tile, patch_grid, tile_features, track_inputs, _pad_to
from .iou_estimation import ConfusionCounts, iou_from_counts
from .location import BiasOptConfig, bias_optimize, encode_coords, encode_region
from .model import build_model, mc_probabilities
from .uncertainty import confidence

log = logging.getLogger(__name__)

MISSING = "—"


@dataclass
class SceneResult:
    probability: np.ndarray
    confidence: np.ndarray
    mask: np.ndarray
    calibrated_confidence: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)


def _window_weights(size: int, mode: str) -> np.ndarray:
    if mode == "uniform":
        return np.ones((size, size))
    if mode == "cosine":
        w = np.sin(np.pi * (np.arange(size) + 0.5) / size) ** 2 + 1e-3
        return np.outer(w, w)
    raise ValueError(f"unknown weighting {mode!r}")


def scene_location(model, scene, location=None):
    mode = model.config.location_mode
    if mode == "none":
        return None
    if location is not None:
        return np.asarray(location, dtype=np.float64)
    if not isinstance(scene, Tile):
        raise ValueError(f"model needs a {mode} location vector")
    return encode_region(scene.region) if mode == "region" else encode_coords(*scene.centroid)


def predict_scene(model, scene, window: int | None = None, overlap: int = 0, mc_passes: int = 0,
                  seed: int = 0, location=None, calibrator=None, weighting: str = "uniform",
                  batch_size: int = 16) -> SceneResult:
    """Tile the scene into overlapping windows, predict each, and average
    probabilities where windows overlap.

    ``scene`` is a Tile or a mapping of already-normalized input arrays.
    ``mc_passes = 0`` uses one deterministic forward pass; ``mc_passes >= 1``
    averages that many dropout passes per window.
    """
    cfg = model.config
    window = window or cfg.patch_size_px
    if overlap < 0 or overlap >= window:
        raise ValueError("overlap must be in [0, window)")
    expected = [s.name for s in track_inputs(cfg.track)]
    feats = tile_features(scene, track_inputs(cfg.track)) if isinstance(scene, Tile) else dict(scene)
    missing = [n for n in expected if n not in feats]
    if missing:
        raise ValueError(f"scene lacks inputs {missing} required by track {cfg.track}")
    h, w = next(iter(feats.values())).shape[-2:]
    padded = {n: _pad_to(np.asarray(feats[n], dtype=np.float32), window) for n in expected}
    ph, pw = next(iter(padded.values())).shape[-2:]
    loc = scene_location(model, scene, location)

    dtype = next(model.parameters()).dtype
    weights = _window_weights(window, weighting)
    acc = np.zeros((cfg.num_classes, ph, pw))
    wsum = np.zeros((ph, pw))
    offsets = patch_grid((ph, pw), window, overlap)
    was_training = model.training
    model.eval()
    try:
        for i in range(0, len(offsets), batch_size):
            chunk = offsets[i:i + batch_size]
            x = {n: torch.as_tensor(np.stack([a[:, r:r + window, c:c + window] for r, c in chunk]), dtype=dtype)
                 for n, a in padded.items()}
            lt = None if loc is None else torch.as_tensor(np.tile(loc, (len(chunk), 1)), dtype=dtype)
            if mc_passes:
                p = mc_probabilities(model, x, lt, mc_passes, seed + i)
            else:
                with torch.no_grad():
                    p = model.predict_proba(x, lt)
            p = p.cpu().numpy().astype(np.float64)
            for (r, c), pk in zip(chunk, p):
                acc[:, r:r + window, c:c + window] += pk * weights
                wsum[r:r + window, c:c + window] += weights
    finally:
        model.train(was_training)
    prob = (acc / wsum)[:, :h, :w]
    prob /= prob.sum(axis=0, keepdims=True)
    conf = confidence(prob)
    result = SceneResult(
        probability=prob,
        confidence=conf,
        mask=prob.argmax(axis=0).astype(np.uint8),
        calibrated_confidence=None if calibrator is None else calibrator(conf),
        provenance={
            "track": cfg.track,
            "location_mode": cfg.location_mode,
            "window": window,
            "overlap": overlap,
            "mc_passes": mc_passes,
            "region_vector": None if loc is None else [float(v) for v in loc],
        },
    )
    return result


def confidence_band(mask, calibrated_conf, threshold: float = 0.95, width: int = 2) -> np.ndarray:
    """Pixels near the predicted glacier boundary whose calibrated confidence is below ``threshold``."""
    mask = np.asarray(mask).astype(bool)
    edge = ndimage.binary_dilation(mask, iterations=width) & ~ndimage.binary_erosion(mask, iterations=width)
    return edge & (np.asarray(calibrated_conf) < threshold)


def evaluate_iou(pred, ref, num_classes: int = 2) -> dict:
    """Per-class IoU (nan where a class is absent from both) and glacier IoU."""
    pred = np.asarray(pred)
    ref = np.asarray(ref)
    if pred.shape != ref.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {ref.shape}")
    out = {}
    for k in range(num_classes):
        counts = ConfusionCounts.from_masks(pred == k, ref == k)
        try:
            out[f"iou_class{k}"] = iou_from_counts(counts)
        except ValueError:
            out[f"iou_class{k}"] = float("nan")
    out["glacier_iou"] = out["iou_class1"]
    return out


def mask_to_geojson(mask, origin, pixel_size, properties=None) -> dict:
    """Vectorize a binary mask into GeoJSON polygons in projected meters."""
    from shapely.geometry import box, mapping
    from shapely.ops import unary_union

    mask = np.asarray(mask).astype(bool)
    ox, oy = origin
    rects = []
    for r in range(mask.shape[0]):
        row = np.concatenate([[0], mask[r].astype(np.int8), [0]])
        d = np.diff(row)
        for c0, c1 in zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1)):
            rects.append(box(ox + c0 * pixel_size, oy - (r + 1) * pixel_size, ox + c1 * pixel_size, oy - r * pixel_size))
    geom = unary_union(rects) if rects else None
    polys = [] if geom is None else (list(geom.geoms) if hasattr(geom, "geoms") else [geom])
    return {
        "type": "FeatureCollection",
        "features": [
            {"type": "Feature", "properties": dict(properties or {}, id=i), "geometry": mapping(p)}
            for i, p in enumerate(polys)
        ],
    }


# --------------------------------------------------------------------------
# comparison harness

STRATEGY_MODES = {
    "global": "none",
    "regional": "none",
    "finetune": "none",
    "region": "region",
    "region+bias": "region",
    "coord": "coord",
}


def _pooled_iou(model, tiles, **kw) -> float:
    tp = fp = fn = 0
    for t in tiles:
        res = predict_scene(model, t, **kw)
        c = ConfusionCounts.from_masks(res.mask == 1, t.label == 1)
        tp, fp, fn = tp + c.tp, fp + c.fp, fn + c.fn
    union = tp + fp + fn
    return tp / union if union else float("nan")


def optimize_scene_region(model, tile, config: BiasOptConfig | None = None, window: int | None = None,
                          return_details: bool = False):
    """Bias-optimise the region vector over a scene's window grid."""
    from .dataset import extract_patch

    window = window or model.config.patch_size_px
    inputs = track_inputs(model.config.track)
    feats = tile_features(tile, inputs)
    samples = [extract_patch(tile, None, inputs, window, offset=o, features=feats)
               for o in patch_grid(tile.shape, window)]
    return bias_optimize(model, samples, config, return_details=return_details)


def _bias_optimized_iou(model, tiles, bias_cfg, window) -> float:
    tp = fp = fn = 0
    for t in tiles:
        vec = optimize_scene_region(model, t, bias_cfg, window)
        res = predict_scene(model, t, window=window, location=vec)
        c = ConfusionCounts.from_masks(res.mask == 1, t.label == 1)
        tp, fp, fn = tp + c.tp, fp + c.fp, fn + c.fn
    union = tp + fp + fn
    return tp / union if union else float("nan")


def comparison_harness(configs, tiles, seed: int = 0, model_config=None, train_config=None,
                       bias_config: BiasOptConfig | None = None, overlap: int = 0):
    """Train/evaluate each (strategy, track) pair; returns ``{region: {label: iou or None}}``.

    Cells for which the track's inputs are unavailable stay ``None``.
    """
    from .model import ModelConfig
    from .training import TrainConfig, train

    model_config = model_config or ModelConfig.toy()
    train_config = replace(train_config or TrainConfig.desk(), seed=seed)
    tiles = [t.load() if not isinstance(t, Tile) else t for t in tiles]
    regions = sorted({t.region for t in tiles if t.split == "test"})
    table = {r.name: {} for r in regions}
    cache = {}

    def global_model(track, mode):
        key = (track, mode)
        if key not in cache:
            cfg = replace(model_config, track=track, location_mode=mode, seed=seed)
            usable = [t for t in tiles if t.has_inputs(track_inputs(track))]
            cache[key] = train(build_model(cfg), usable, "global", train_config)[0]
        return cache[key]

    for strategy, track in configs:
        label = f"{strategy}/{track}"
        if strategy not in STRATEGY_MODES:
            raise ValueError(f"unknown strategy {strategy!r}")
        inputs = track_inputs(track)
        usable = [t for t in tiles if t.has_inputs(inputs)]
        for reg in regions:
            table[reg.name][label] = None
        splits = {s for t in usable for s in [t.split]}
        if not {"train", "val", "test"} <= splits:
            log.info("%s: inputs unavailable, leaving cells empty", label)
            continue
        mode = STRATEGY_MODES[strategy]
        for reg in regions:
            reg_tiles = [t for t in usable if t.region == reg]
            test = [t for t in reg_tiles if t.split == "test"]
            if not test:
                continue
            if strategy == "regional":
                if not any(t.split == "train" for t in reg_tiles) or not any(t.split == "val" for t in reg_tiles):
                    continue
                cfg = replace(model_config, track=track, location_mode="none", seed=seed)
                model = train(build_model(cfg), usable, "regional", train_config, regions=[reg])[0]
            elif strategy == "finetune":
                if not any(t.split == "train" for t in reg_tiles) or not any(t.split == "val" for t in reg_tiles):
                    continue
                model = copy.deepcopy(global_model(track, "none"))
                model = train(model, usable, "finetune", train_config, regions=[reg])[0]
            else:
                model = global_model(track, mode)
            if strategy == "region+bias":
                iou = _bias_optimized_iou(model, test, bias_config or BiasOptConfig(), model.config.patch_size_px)
            else:
                iou = _pooled_iou(model, test, overlap=overlap)
            table[reg.name][label] = iou
            log.info("%s %s IoU %.4f", label, reg.name, iou)
    return table


def write_comparison_csv(table, path, labels=None) -> None:
    labels = labels or sorted({k for row in table.values() for k in row})
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["region", *labels])
        for reg, row in table.items():
            w.writerow([reg, *[MISSING if row.get(k) is None else f"{row[k]:.4f}" for k in labels]])
        avg = []
        for k in labels:
            vals = [row[k] for row in table.values() if row.get(k) is not None]
            avg.append(f"{np.mean(vals):.4f}" if vals else MISSING)
        w.writerow(["Average", *avg])


def read_comparison_csv(path) -> list[list[str]]:
    with open(path, newline="") as fh:
        return list(csv.reader(fh))
