"""Losses, learning-rate schedule, augmentation and the training loop."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .dataset import Region, Sample, extract_patch, onehot, patch_grid, tile_features, track_inputs
from .location import RegionSampler, encode_coords
from .model import GlaViTU, to_batch

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
STRATEGIES = ("global", "regional", "finetune")


@dataclass
class TrainConfig:
    lr_init: float = 5e-4
    cycles: tuple[int, ...] = (10, 20, 40, 80)
    focal_gamma: float = 2.0
    label_smoothing: float = 0.1
    finetune_lr: float = 5e-5
    batch_size: int = 8
    steps_per_epoch: int = 20
    seed: int = 0
    p_unknown: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    # augmentation toggles
    flips: bool = True
    rotations: bool = True
    crop_rescale: bool = True
    contrast: bool = True
    noise: bool = True
    occlusion: bool = True
    crop_min: float = 0.75
    contrast_range: float = 0.2
    noise_std: float = 0.02
    occlusion_max: float = 0.3

    def __post_init__(self):
        self.cycles = tuple(int(c) for c in self.cycles)
        self.betas = tuple(self.betas)
        if not self.lr_init > 0:
            raise ValueError("lr_init must be positive")
        if not self.cycles or min(self.cycles) < 1:
            raise ValueError("cycles must be a nonempty list of positive epoch counts")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be >= 0")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """The 10/20/40/80 cycle ratios at 1/10 scale."""
        base = dict(cycles=(1, 2, 4, 8))
        base.update(overrides)
        return cls(**base)

    def augmentations_off(self) -> "TrainConfig":
        c = copy.copy(self)
        c.flips = c.rotations = c.crop_rescale = c.contrast = c.noise = c.occlusion = False
        return c


# --------------------------------------------------------------------------
# loss and schedule

def _focal_terms(p, logp, target, gamma, smoothing):
    c = target.shape[1]
    y = target * (1.0 - smoothing) + smoothing / c
    per_pixel = -(y * (1.0 - p) ** gamma * logp).sum(dim=1)
    return per_pixel.mean()


def focal_loss(probs, label_onehot, gamma: float = 2.0, smoothing: float = 0.1):
    """Mean over pixels of ``-sum_c y_c (1 - p_c)^gamma log p_c``.

    ``y`` is the one-hot label smoothed as ``y (1 - eps) + eps / C``; the class
    axis is 1 for batched (B, C, ...) tensors. Probabilities are floored at
    1e-12 before the log.
    """
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    probs = torch.as_tensor(probs)
    label_onehot = torch.as_tensor(label_onehot, dtype=probs.dtype)
    if probs.shape != label_onehot.shape:
        raise ValueError(f"shape mismatch: {tuple(probs.shape)} vs {tuple(label_onehot.shape)}")
    if probs.ndim == 1:
        probs, label_onehot = probs[None], label_onehot[None]
    return _focal_terms(probs, torch.log(probs.clamp_min(PROB_FLOOR)), label_onehot, gamma, smoothing)


def focal_loss_logits(logits, label_onehot, gamma: float = 2.0, smoothing: float = 0.1):
    """``focal_loss`` evaluated from logits with a stable log-softmax."""
    if logits.shape != label_onehot.shape:
        raise ValueError(f"shape mismatch: {tuple(logits.shape)} vs {tuple(label_onehot.shape)}")
    logp = torch.log_softmax(logits, dim=1).clamp_min(math.log(PROB_FLOOR))
    return _focal_terms(logp.exp(), logp, label_onehot.to(logits.dtype), gamma, smoothing)


def lr_schedule(epoch: float, config: TrainConfig | None = None, lr_init: float | None = None, cycles=None) -> float:
    """Cosine decay with warm restarts at the start of every cycle."""
    if config is not None:
        lr_init = config.lr_init if lr_init is None else lr_init
        cycles = config.cycles if cycles is None else cycles
    if lr_init is None or cycles is None:
        raise ValueError("lr_init and cycles are required")
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    start = 0
    for length in cycles:
        if epoch < start + length:
            t = epoch - start
            return lr_init * 0.5 * (1.0 + math.cos(math.pi * t / length))
        start += length
    raise ValueError(f"epoch {epoch} beyond the schedule budget of {start} epochs")


# --------------------------------------------------------------------------
# augmentation

def _geometric(sample: Sample, fn) -> Sample:
    return Sample(
        features={k: np.ascontiguousarray(fn(v)) for k, v in sample.features.items()},
        label_onehot=np.ascontiguousarray(fn(sample.label_onehot)),
        location=sample.location,
        offset=sample.offset,
    )


def _crop_rescale(arr: np.ndarray, box, size, order: int) -> np.ndarray:
    r, c, h, w = box
    crop = arr[:, r:r + h, c:c + w]
    zoom = (1, size[0] / h, size[1] / w)
    out = ndimage.zoom(crop, zoom, order=order, mode="nearest", grid_mode=True)
    return out[:, : size[0], : size[1]]


def augment(sample: Sample, rng: np.random.Generator, config: TrainConfig | None = None) -> Sample:
    """Random flips, 90-degree rotations, crop+rescale (geometric, applied to
    features and label alike), then contrast jitter, channel- and pixel-wise
    Gaussian noise, and occlusion of a rectangle in one input (features only)."""
    cfg = config or TrainConfig()
    out = sample
    if cfg.flips:
        if rng.random() < 0.5:
            out = _geometric(out, lambda a: a[:, :, ::-1])
        if rng.random() < 0.5:
            out = _geometric(out, lambda a: a[:, ::-1, :])
    if cfg.rotations:
        k = int(rng.integers(0, 4))
        if k:
            out = _geometric(out, lambda a: np.rot90(a, k, axes=(1, 2)))
    if cfg.crop_rescale and rng.random() < 0.5:
        h, w = out.size
        frac = rng.uniform(cfg.crop_min, 1.0)
        ch, cw = max(1, int(round(h * frac))), max(1, int(round(w * frac)))
        box = (int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1)), ch, cw)
        labels = np.argmax(out.label_onehot, axis=0)[None]
        out = Sample(
            features={k: _crop_rescale(v, box, (h, w), 1).astype(v.dtype) for k, v in out.features.items()},
            label_onehot=onehot(_crop_rescale(labels, box, (h, w), 0)[0], out.label_onehot.shape[0]),
            location=out.location,
            offset=out.offset,
        )
    feats = out.features
    if cfg.contrast or cfg.noise or cfg.occlusion:
        feats = {k: v.copy() for k, v in feats.items()}
    if cfg.contrast:
        for k, v in feats.items():
            gain = rng.uniform(1 - cfg.contrast_range, 1 + cfg.contrast_range, size=(v.shape[0], 1, 1))
            mean = v.mean(axis=(1, 2), keepdims=True)
            feats[k] = ((v - mean) * gain + mean).astype(v.dtype)
    if cfg.noise:
        for k, v in feats.items():
            channel = rng.normal(0, cfg.noise_std, size=(v.shape[0], 1, 1))
            pixel = rng.normal(0, cfg.noise_std, size=v.shape)
            feats[k] = (v + channel + pixel).astype(v.dtype)
    if cfg.occlusion and rng.random() < 0.5:
        name = list(feats)[int(rng.integers(0, len(feats)))]
        h, w = out.size
        oh = int(rng.integers(1, max(2, int(h * cfg.occlusion_max) + 1)))
        ow = int(rng.integers(1, max(2, int(w * cfg.occlusion_max) + 1)))
        r, c = int(rng.integers(0, h - oh + 1)), int(rng.integers(0, w - ow + 1))
        feats[name][:, r:r + oh, c:c + ow] = 0.0
    if feats is not out.features:
        out = Sample(feats, out.label_onehot, out.location, out.offset)
    return out


# --------------------------------------------------------------------------
# training loop

@dataclass
class _Prepared:
    tile: object
    features: dict


def _prepare(tiles, inputs):
    prepared = []
    for t in tiles:
        if hasattr(t, "load") and not hasattr(t, "rasters"):
            t = t.load()
        prepared.append(_Prepared(t, tile_features(t, inputs)))
    return prepared


def _location(tile, mode: str, sampler: RegionSampler | None):
    if mode == "region":
        return sampler(tile.region) if sampler is not None else None
    if mode == "coord":
        return encode_coords(*tile.centroid)
    return None


def validation_iou(model: GlaViTU, prepared, inputs, patch_size: int, location_mode: str) -> float:
    """Glacier-class IoU pooled over a deterministic patch grid of the given tiles."""
    from .location import encode_region

    tp = fp = fn = 0
    dtype = next(model.parameters()).dtype
    model.eval()
    with torch.no_grad():
        for item in prepared:
            t = item.tile
            samples = []
            for off in patch_grid(t.shape, patch_size):
                s = extract_patch(t, None, inputs, patch_size, "none", offset=off, features=item.features)
                if location_mode == "region":
                    s.location = encode_region(t.region)
                elif location_mode == "coord":
                    s.location = encode_coords(*t.centroid)
                samples.append(s)
            for i in range(0, len(samples), 16):
                feats, loc, y = to_batch(samples[i:i + 16], dtype)
                pred = model(feats, loc).argmax(dim=1) == 1
                ref = y[:, 1] > 0.5
                tp += int((pred & ref).sum())
                fp += int((pred & ~ref).sum())
                fn += int((~pred & ref).sum())
    union = tp + fp + fn
    return tp / union if union else 1.0


def filter_regions(tiles, regions):
    if not regions:
        return list(tiles)
    wanted = {Region.parse(r) for r in regions}
    return [t for t in tiles if Region.parse(t.region) in wanted]


def train(model: GlaViTU, tiles, strategy: str = "global", config: TrainConfig | None = None,
          regions=None, val_tiles=None, history_path=None):
    """Train ``model`` in place and return ``(best_model, history)``.

    ``tiles`` are split by their ``split`` attribute unless ``val_tiles`` is
    given. ``regional`` and ``finetune`` restrict data to ``regions``;
    ``finetune`` runs only the last cycle at ``finetune_lr`` starting from the
    supplied (pretrained) model. The returned model carries the weights of the
    epoch with the highest validation glacier IoU.
    """
    cfg = config or TrainConfig()
    if strategy not in STRATEGIES:
        raise ValueError(f"strategy must be one of {STRATEGIES}")
    if strategy in ("regional", "finetune") and not regions:
        raise ValueError(f"strategy {strategy!r} needs a region (or region cluster) filter")
    mcfg = model.config
    inputs = track_inputs(mcfg.track)
    tiles = filter_regions(tiles, regions)
    if val_tiles is None:
        train_tiles = [t for t in tiles if t.split == "train"]
        val_tiles = [t for t in tiles if t.split == "val"]
    else:
        train_tiles, val_tiles = list(tiles), filter_regions(val_tiles, regions)
    if not train_tiles:
        raise ValueError("empty training split")
    if not val_tiles:
        raise ValueError("empty validation split")

    if strategy == "finetune":
        cycles, lr_init = (cfg.cycles[-1],), cfg.finetune_lr
    else:
        cycles, lr_init = cfg.cycles, cfg.lr_init

    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    sampler = RegionSampler(cfg.p_unknown, np.random.default_rng(cfg.seed + 1))
    train_prep = _prepare(train_tiles, inputs)
    val_prep = _prepare(val_tiles, inputs)
    dtype = next(model.parameters()).dtype
    opt = torch.optim.Adam(model.parameters(), lr=lr_init, betas=cfg.betas, eps=cfg.eps)

    best_iou, best_state = -1.0, copy.deepcopy(model.state_dict())
    history = []
    for epoch in range(sum(cycles)):
        lr = lr_schedule(epoch, lr_init=lr_init, cycles=cycles)
        for g in opt.param_groups:
            g["lr"] = lr
        model.train()
        losses = []
        for _ in range(cfg.steps_per_epoch):
            batch = []
            for _ in range(cfg.batch_size):
                item = train_prep[int(rng.integers(0, len(train_prep)))]
                s = extract_patch(item.tile, rng, inputs, mcfg.patch_size_px, "none", features=item.features)
                s.location = _location(item.tile, mcfg.location_mode, sampler)
                batch.append(augment(s, rng, cfg))
            feats, loc, y = to_batch(batch, dtype)
            loss = focal_loss_logits(model(feats, loc), y, cfg.focal_gamma, cfg.label_smoothing)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        val_iou = validation_iou(model, val_prep, inputs, mcfg.patch_size_px, mcfg.location_mode)
        row = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)), "val_iou": val_iou}
        history.append(row)
        log.info("epoch %d lr %.3g loss %.5f val_iou %.4f", epoch, lr, row["train_loss"], val_iou)
        if val_iou > best_iou:
            best_iou, best_state = val_iou, copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    if history_path is not None:
        write_history(history, history_path)
    return model, history


def write_history(history, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "lr", "train_loss", "val_iou"])
        w.writeheader()
        w.writerows(history)
