"""Glacier mapping toolkit: GlaViTU segmentation, generalisation strategies,
calibrated uncertainty, reference-free IoU estimates and ice divides."""

from .dataset import Region, SynthSpec, Tile, synth_dataset, synth_scene, track_inputs
from .model import GlaViTU, ModelConfig, build_model, load_state, save_state

__version__ = "0.1.0"

__all__ = [
    "GlaViTU",
    "ModelConfig",
    "Region",
    "SynthSpec",
    "Tile",
    "build_model",
    "load_state",
    "save_state",
    "synth_dataset",
    "synth_scene",
    "track_inputs",
]
