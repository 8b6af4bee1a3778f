import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from glaciermap import geotiff
from glaciermap.dataset import (
    DatasetError, RasterStack, Region, SynthSpec, Tile, extract_patch, load_manifest, load_synth_spec,
    onehot, oracle_segmentation, patch_grid, split_tiles, synth_dataset, synth_scene, tile_features,
    track_inputs, write_manifest,
)


def coord_tile(size, groups=("optical", "dem")):
    """Tile whose every band encodes the pixel's flat index, and a label of the same parity."""
    idx = np.arange(size * size, dtype=np.float64).reshape(size, size)
    rasters = {}
    for g in groups:
        n = {"optical": 6, "dem": 2, "thermal": 1, "sar": 3}[g]
        rasters[g] = RasterStack(np.repeat(idx[None], n, axis=0))
    return Tile("c", "train", rasters, (idx.astype(int) % 2).astype(np.uint8))


class TestRegion:
    def test_parse_forms(self):
        assert Region.parse("alp") is Region.ALP
        assert Region.parse(3) is Region.CAU
        assert Region.parse("HMA3") is Region.HMA
        assert int(Region.UNKNOWN) == 11

    def test_unknown_name(self):
        with pytest.raises(DatasetError):
            Region.parse("atlantis")


class TestTracks:
    def test_branch_counts(self):
        assert [s.name for s in track_inputs("OPT_DEM")] == ["optical", "dem"]
        assert len(track_inputs("OPT_DEM_THERMAL")) == 3
        assert len(track_inputs("OPT_DEM_INSAR")) == 4

    def test_unknown_track(self):
        with pytest.raises(DatasetError, match="unknown data track"):
            track_inputs("LIDAR")


class TestTile:
    def test_shape_mismatch(self):
        with pytest.raises(DatasetError, match="shape mismatch"):
            Tile("t", "train", {"optical": RasterStack(np.zeros((6, 4, 4)))}, np.zeros((5, 5), np.uint8))

    def test_not_coregistered(self):
        r = {"optical": RasterStack(np.zeros((6, 4, 4))), "dem": RasterStack(np.zeros((2, 4, 4)), origin=(1.0, 0.0))}
        with pytest.raises(DatasetError, match="co-registered"):
            Tile("t", "train", r, np.zeros((4, 4), np.uint8))

    def test_bad_label_values(self):
        with pytest.raises(DatasetError):
            Tile("t", "train", {"optical": RasterStack(np.zeros((6, 2, 2)))}, np.full((2, 2), 2))

    def test_nodata_is_zero_filled(self):
        bands = np.full((6, 4, 4), 0.5, dtype=np.float32)
        bands[:, 0, 0] = np.nan
        t = Tile("t", "train", {"optical": RasterStack(bands), "dem": RasterStack(np.ones((2, 4, 4)))},
                 np.zeros((4, 4), np.uint8))
        f = tile_features(t, track_inputs("OPT_DEM"))
        assert np.all(f["optical"][:, 0, 0] == 0)
        assert np.all(f["optical"][:, 1, 1] == 0.5)


class TestSplit:
    def test_ten(self):
        assert tuple(map(len, split_tiles(range(10), 0))) == (6, 2, 2)

    def test_hundred(self):
        assert tuple(map(len, split_tiles(range(100), 0))) == (60, 20, 20)

    def test_deterministic(self):
        assert split_tiles(range(17), 4) == split_tiles(range(17), 4)

    def test_too_few(self):
        with pytest.raises(DatasetError):
            split_tiles(range(2))

    @given(st.integers(3, 200), st.integers(0, 1000))
    def test_partition(self, n, seed):
        parts = split_tiles(range(n), seed)
        flat = [x for p in parts for x in p]
        assert sorted(flat) == list(range(n))
        assert all(len(p) > 0 for p in parts)


class TestExtractPatch:
    def test_whole_tile(self):
        t = coord_tile(32)
        s = extract_patch(t, np.random.default_rng(0), patch_size=32)
        assert s.offset == (0, 0)
        assert s.label_onehot.shape == (2, 32, 32)

    def test_offset_deterministic_and_in_range(self):
        t = coord_tile(64)
        a = extract_patch(t, np.random.default_rng(5), patch_size=32)
        b = extract_patch(t, np.random.default_rng(5), patch_size=32)
        assert a.offset == b.offset
        assert all(0 <= o <= 32 for o in a.offset)

    def test_coregistered_crop(self):
        t = coord_tile(48)
        raw = np.arange(48 * 48).reshape(48, 48)
        for seed in range(5):
            s = extract_patch(t, np.random.default_rng(seed), patch_size=16)
            r, c = s.offset
            expect = raw[r:r + 16, c:c + 16]
            # optical is clipped to [0, 1]; the coordinate survives in the label parity and in elevation ranking
            assert np.array_equal(np.argmax(s.label_onehot, 0), expect % 2)
            assert np.array_equal(np.argsort(s.features["dem"][0].ravel()), np.argsort(expect.ravel()))

    def test_missing_group(self):
        t = coord_tile(16)
        with pytest.raises(DatasetError, match="group thermal unavailable"):
            extract_patch(t, np.random.default_rng(0), track_inputs("OPT_DEM_THERMAL"), 16)

    def test_small_tile_is_padded(self):
        t = coord_tile(20)
        s = extract_patch(t, np.random.default_rng(0), patch_size=32)
        assert s.features["optical"].shape == (6, 32, 32)
        assert np.allclose(s.label_onehot.sum(0), 1)


class TestPatchGrid:
    def test_cover(self):
        offs = patch_grid((100, 70), 32, 8)
        cover = np.zeros((100, 70), bool)
        for r, c in offs:
            cover[r:r + 32, c:c + 32] = True
        assert cover.all()
        assert max(r for r, _ in offs) == 68

    def test_bad_overlap(self):
        with pytest.raises(ValueError):
            patch_grid((64, 64), 32, 32)


class TestSynth:
    def test_oracle_recovers_label(self):
        for seed in range(4):
            t = synth_scene(SynthSpec(size=96, n_blobs=3, noise=0.0, debris_fraction=0.0), seed)
            assert np.array_equal(oracle_segmentation(t), t.label)
            assert t.label.any()

    def test_no_blobs(self):
        t = synth_scene(SynthSpec(size=32, n_blobs=0), 1)
        assert not t.label.any()

    def test_bit_identical(self):
        a = synth_scene(SynthSpec(size=48, noise=0.1, debris_fraction=0.3), 9)
        b = synth_scene(SynthSpec(size=48, noise=0.1, debris_fraction=0.3), 9)
        assert np.array_equal(a.label, b.label)
        for g in a.rasters:
            assert a.rasters[g].bands.tobytes() == b.rasters[g].bands.tobytes()

    def test_nonpositive_size(self):
        with pytest.raises(DatasetError):
            synth_scene(SynthSpec(size=0))

    def test_optional_groups(self):
        t = synth_scene(SynthSpec(size=16, thermal=False, sar=False))
        assert t.groups == ("optical", "dem")
        assert not t.has_inputs(track_inputs("OPT_DEM_THERMAL"))

    def test_dataset_splits_per_region(self):
        tiles = synth_dataset(12, seed=2, regions=("ALP", "SCA"), base=SynthSpec(size=16))
        for reg in (Region.ALP, Region.SCA):
            splits = {t.split for t in tiles if t.region == reg}
            assert splits == {"train", "val", "test"}

    def test_spec_toml(self, tmp_path):
        p = tmp_path / "s.toml"
        p.write_text('[synth]\nsize = 40\nnoise = 0.2\ncentroid = [10.0, 20.0]\n')
        spec = load_synth_spec(p)
        assert spec.size == 40 and spec.centroid == (10.0, 20.0)
        p.write_text("[synth]\nbogus = 1\n")
        with pytest.raises(DatasetError):
            load_synth_spec(p)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 20), st.integers(1, 20))
def test_onehot_sums_to_one(h, w):
    lab = np.random.default_rng(h * 31 + w).integers(0, 2, (h, w))
    oh = onehot(lab)
    assert np.array_equal(oh.sum(0), np.ones((h, w)))
    assert np.array_equal(oh.argmax(0), lab)


def test_manifest_round_trip(tmp_path):
    tiles = synth_dataset(3, seed=1, base=SynthSpec(size=24))
    path = write_manifest(tiles, tmp_path)
    doc = json.loads(path.read_text())
    assert {"id", "split", "region", "centroid", "groups", "paths"} <= set(doc["tiles"][0])
    refs = load_manifest(path)
    for t, ref in zip(tiles, refs):
        back = ref.load()
        assert back.id == t.id and back.region == t.region and back.split == t.split
        assert np.array_equal(back.label, t.label)
        for g in t.rasters:
            assert np.array_equal(back.rasters[g].bands, t.rasters[g].bands)


def test_manifest_shape_mismatch(tmp_path):
    geotiff.write_geotiff(tmp_path / "o.tif", np.zeros((6, 8, 8), np.float32))
    geotiff.write_geotiff(tmp_path / "l.tif", np.zeros((9, 9), np.uint8))
    (tmp_path / "m.json").write_text(json.dumps({"tiles": [{"id": "x", "paths": {"optical": "o.tif", "label": "l.tif"}}]}))
    with pytest.raises(DatasetError, match="shape mismatch"):
        load_manifest(tmp_path / "m.json")
