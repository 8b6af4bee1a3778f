import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from torch import nn

from glaciermap.dataset import SynthSpec, extract_patch, synth_dataset, synth_scene, tile_features, track_inputs
from glaciermap.inference import (
    MISSING, comparison_harness, confidence_band, evaluate_iou, mask_to_geojson, predict_scene,
    read_comparison_csv, write_comparison_csv,
)
from glaciermap.model import ModelConfig, build_model, forward
from glaciermap.training import TrainConfig
from glaciermap.uncertainty import Calibrator


class PointwiseStub(nn.Module):
    """Per-pixel linear classifier: output at a pixel depends only on that pixel's inputs."""

    def __init__(self, window=16):
        super().__init__()
        self.config = ModelConfig.toy(patch_size_px=window, token_patch=8)
        self.conv = nn.Conv2d(8, 2, 1)
        torch.nn.init.normal_(self.conv.weight, generator=torch.Generator().manual_seed(0))

    def predict_proba(self, feats, loc=None):
        return torch.softmax(self.conv(torch.cat([feats["optical"], feats["dem"]], 1)), 1)


def const_scene(h, w):
    return {"optical": np.full((6, h, w), 0.3, np.float32), "dem": np.full((2, h, w), 0.7, np.float32)}


class TestPredictScene:
    def test_single_window_equals_forward(self, trained_toy):
        model = trained_toy[0]
        tile = synth_scene(SynthSpec(size=32), 3)
        res = predict_scene(model, tile)
        inputs = track_inputs("OPT_DEM")
        ref = forward(model, extract_patch(tile, None, inputs, 32, offset=(0, 0)))
        assert np.allclose(res.probability, ref, atol=1e-6)

    def test_no_overlap_is_block_assembly(self, trained_toy):
        model = trained_toy[0]
        tile = synth_scene(SynthSpec(size=64), 4)
        res = predict_scene(model, tile, overlap=0)
        inputs = track_inputs("OPT_DEM")
        feats = tile_features(tile, inputs)
        for r in (0, 32):
            for c in (0, 32):
                ref = forward(model, extract_patch(tile, None, inputs, 32, offset=(r, c), features=feats))
                assert np.allclose(res.probability[:, r:r + 32, c:c + 32], ref, atol=1e-6)

    @pytest.mark.parametrize("window,overlap,weighting", [(16, 0, "uniform"), (16, 5, "uniform"),
                                                          (16, 8, "cosine"), (32, 7, "uniform")])
    def test_constant_scene_constant_output(self, window, overlap, weighting):
        stub = PointwiseStub(window)
        res = predict_scene(stub, const_scene(45, 37), window=window, overlap=overlap, weighting=weighting)
        assert res.probability.shape == (2, 45, 37)
        assert np.ptp(res.probability, axis=(1, 2)).max() < 1e-6

    @settings(max_examples=10, deadline=None)
    @given(st.integers(20, 70), st.integers(20, 70), st.integers(0, 15))
    def test_stitched_probabilities_normalized(self, h, w, overlap):
        rng = np.random.default_rng(h * w)
        scene = {"optical": rng.random((6, h, w)).astype(np.float32), "dem": rng.random((2, h, w)).astype(np.float32)}
        res = predict_scene(PointwiseStub(16), scene, overlap=overlap)
        assert np.abs(res.probability.sum(0) - 1).max() < 1e-6
        assert res.mask.shape == (h, w)
        assert np.array_equal(res.mask, res.probability.argmax(0))

    def test_mc_deterministic(self, trained_toy):
        tile = synth_scene(SynthSpec(size=48), 2)
        a = predict_scene(trained_toy[0], tile, mc_passes=3, seed=5, overlap=8)
        b = predict_scene(trained_toy[0], tile, mc_passes=3, seed=5, overlap=8)
        assert np.array_equal(a.probability, b.probability)
        assert a.provenance["mc_passes"] == 3

    def test_calibrated_confidence(self, trained_toy):
        cal = Calibrator([0.1, 0.5, 0.9], [0.3, 0.7, 0.95])
        res = predict_scene(trained_toy[0], synth_scene(SynthSpec(size=32), 1), calibrator=cal)
        assert np.array_equal(res.calibrated_confidence, cal(res.confidence))

    def test_group_mismatch(self, trained_toy):
        with pytest.raises(ValueError, match="lacks inputs"):
            predict_scene(trained_toy[0], {"optical": np.zeros((6, 32, 32), np.float32)})

    def test_bad_overlap(self, trained_toy):
        with pytest.raises(ValueError):
            predict_scene(trained_toy[0], synth_scene(SynthSpec(size=32)), overlap=32)

    def test_region_model_uses_tile_region(self):
        m = build_model(ModelConfig.toy(location_mode="region"))
        res = predict_scene(m, synth_scene(SynthSpec(size=32, region="SCA")))
        assert res.provenance["region_vector"][9] == 1.0
        with pytest.raises(ValueError, match="location"):
            predict_scene(m, const_scene(32, 32))


class TestEvaluate:
    def test_cases(self):
        ref = np.array([[1, 0], [0, 1]])
        assert evaluate_iou(ref, ref)["glacier_iou"] == 1.0
        assert evaluate_iou(1 - ref, ref)["glacier_iou"] == 0.0
        assert evaluate_iou(np.ones((2, 2)), ref)["glacier_iou"] == 0.5

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            evaluate_iou(np.ones((2, 2)), np.ones((3, 2)))

    def test_empty_class_is_nan(self):
        assert np.isnan(evaluate_iou(np.zeros((2, 2)), np.zeros((2, 2)))["glacier_iou"])

    @given(st.integers(0, 10_000))
    def test_relabel_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        p, r = rng.integers(0, 2, (6, 6)), rng.integers(0, 2, (6, 6))
        a, b = evaluate_iou(p, r), evaluate_iou(1 - p, 1 - r)
        assert np.allclose([a["iou_class0"], a["iou_class1"]], [b["iou_class1"], b["iou_class0"]], equal_nan=True)


def test_confidence_band():
    mask = np.zeros((12, 12), np.uint8)
    mask[3:9, 3:9] = 1
    band = confidence_band(mask, np.full((12, 12), 0.5))
    assert band[3, 3] and band[5, 1] and not band[6, 6] and not band[0, 11]
    assert not confidence_band(mask, np.ones((12, 12))).any()


def test_mask_to_geojson():
    mask = np.zeros((5, 6), np.uint8)
    mask[1:3, 1:4] = 1
    mask[4, 5] = 1
    doc = mask_to_geojson(mask, (100.0, 200.0), 10.0, {"tile": "x"})
    assert len(doc["features"]) == 2
    from shapely.geometry import shape

    areas = sorted(shape(f["geometry"]).area for f in doc["features"])
    assert areas == [100.0, 600.0]
    json.dumps(doc)


class TestHarness:
    FAST = TrainConfig(cycles=(1,), steps_per_epoch=2, batch_size=2)

    def test_one_by_one(self, tmp_path):
        tiles = synth_dataset(5, seed=1, base=SynthSpec(size=32))
        table = comparison_harness([("global", "OPT_DEM")], tiles, train_config=self.FAST)
        assert list(table) == ["ALP"] and list(table["ALP"]) == ["global/OPT_DEM"]
        assert 0.0 <= table["ALP"]["global/OPT_DEM"] <= 1.0
        write_comparison_csv(table, tmp_path / "c.csv")
        rows = read_comparison_csv(tmp_path / "c.csv")
        assert rows[0] == ["region", "global/OPT_DEM"] and rows[1][0] == "ALP" and rows[2][0] == "Average"

    def test_missing_track_is_dash(self, tmp_path):
        tiles = synth_dataset(5, seed=1, base=SynthSpec(size=32, thermal=False))
        table = comparison_harness([("global", "OPT_DEM_THERMAL"), ("global", "OPT_DEM")], tiles,
                                   train_config=self.FAST)
        assert table["ALP"]["global/OPT_DEM_THERMAL"] is None
        assert table["ALP"]["global/OPT_DEM"] is not None
        write_comparison_csv(table, tmp_path / "c.csv")
        rows = read_comparison_csv(tmp_path / "c.csv")
        col = rows[0].index("global/OPT_DEM_THERMAL")
        assert rows[1][col] == MISSING and rows[2][col] == MISSING

    def test_unknown_strategy(self):
        tiles = synth_dataset(5, seed=1, base=SynthSpec(size=32))
        with pytest.raises(ValueError, match="strategy"):
            comparison_harness([("ensemble", "OPT_DEM")], tiles, train_config=self.FAST)
