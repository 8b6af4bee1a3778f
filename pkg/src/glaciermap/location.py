"""Region/coordinate encodings and inference-time bias optimisation of the
region vector."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataset import Region

log = logging.getLogger(__name__)

N_REGIONS = len(Region)


def encode_region(code) -> np.ndarray:
    """One-hot region vector of length 12 (UNKNOWN is the last position)."""
    v = np.zeros(N_REGIONS, dtype=np.float32)
    v[int(Region.parse(code))] = 1.0
    return v


class RegionSampler:
    """Training-time region encoder that relabels samples as UNKNOWN with probability ``p_unknown``."""

    def __init__(self, p_unknown: float = 0.1, rng: np.random.Generator | None = None):
        if not 0.0 <= p_unknown <= 1.0:
            raise ValueError("p_unknown must be in [0, 1]")
        self.p_unknown = p_unknown
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def __call__(self, code) -> np.ndarray:
        if self.p_unknown > 0 and self.rng.random() < self.p_unknown:
            return encode_region(Region.UNKNOWN)
        return encode_region(code)


def encode_coords(lat: float, lon: float) -> np.ndarray:
    """``(sin lat, cos lat, sin lon, cos lon)`` of a centroid given in degrees."""
    if not -90.0 <= lat <= 90.0:
        raise ValueError(f"latitude {lat} outside [-90, 90]")
    if not -180.0 <= lon <= 180.0:
        raise ValueError(f"longitude {lon} outside [-180, 180]")
    la, lo = math.radians(lat), math.radians(lon)
    return np.array([math.sin(la), math.cos(la), math.sin(lo), math.cos(lo)], dtype=np.float64)


@dataclass
class BiasOptConfig:
    lr: float = 1e-4
    max_epochs: int = 100
    rel_tol: float = 1e-5
    patience: int = 5
    increase_tol: float = 1e-9

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")


@dataclass
class BiasOptResult:
    region_vector: np.ndarray
    logits: np.ndarray
    objective_history: list[float] = field(default_factory=list)
    stopped: str = "max_epochs"


def entropy_objective(probs: torch.Tensor, floor: float = 1e-12) -> torch.Tensor:
    """Sum over pixels of ``-sum_c p_c log_C p_c``; class axis is 1."""
    c = probs.shape[1]
    p = probs.clamp_min(floor)
    return -(probs * torch.log(p)).sum(dim=1).sum() / math.log(c)


def bias_optimize(model, scene_samples, config: BiasOptConfig | None = None, return_details: bool = False):
    """Tune soft region logits ``r`` to minimize summed predictive entropy over a scene.

    The region vector fed to the frozen model is ``softmax(r)``; ``r`` starts
    at zero (the uniform mixture of all regions). Stops after ``max_epochs``,
    when the relative objective change stays below ``rel_tol`` for
    ``patience`` epochs, or when the objective increases (the step is
    rejected). Returns the region vector on the simplex.
    """
    config = config or BiasOptConfig()
    if getattr(model.config, "location_mode", "none") != "region":
        raise ValueError("bias optimisation requires a model trained with location_mode='region'")
    if not scene_samples:
        raise ValueError("no scene samples given")
    dtype = next(model.parameters()).dtype
    names = list(scene_samples[0].features)
    feats = {n: torch.as_tensor(np.stack([s.features[n] for s in scene_samples]), dtype=dtype) for n in names}
    b = len(scene_samples)

    was_training = model.training
    model.eval()
    requires = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)

    r = torch.zeros(N_REGIONS, dtype=dtype, requires_grad=True)
    opt = torch.optim.Adam([r], lr=config.lr)

    def objective():
        v = torch.softmax(r, dim=0)
        return entropy_objective(model.predict_proba(feats, v.expand(b, -1)))

    history = []
    stopped = "max_epochs"
    calm = 0
    try:
        obj = objective()
        history.append(float(obj.detach()))
        for _ in range(config.max_epochs):
            prev_r = r.detach().clone()
            opt.zero_grad()
            obj.backward()
            opt.step()
            new = objective()
            val, last = float(new.detach()), history[-1]
            if val > last + config.increase_tol * max(1.0, abs(last)):
                with torch.no_grad():
                    r.copy_(prev_r)
                stopped = "objective_increase"
                break
            history.append(val)
            obj = new
            calm = calm + 1 if abs(last - val) <= config.rel_tol * max(abs(last), 1e-300) else 0
            if calm >= config.patience:
                stopped = "converged"
                break
    finally:
        for p, req in zip(model.parameters(), requires):
            p.requires_grad_(req)
        model.train(was_training)

    logits = r.detach().cpu().numpy().astype(np.float64)
    vec = np.exp(logits - logits.max())
    vec /= vec.sum()
    log.debug("bias optimisation stopped (%s) after %d epochs", stopped, len(history) - 1)
    if return_details:
        return BiasOptResult(vec, logits, history, stopped)
    return vec


def write_region_vector(vec, path) -> None:
    """Persist a region vector as JSON with one named weight per region."""
    doc = {"weights": {reg.name: float(vec[int(reg)]) for reg in Region}}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=2))


def read_region_vector(path) -> np.ndarray:
    doc = json.loads(Path(path).read_text())
    return np.array([doc["weights"][reg.name] for reg in Region], dtype=np.float64)
