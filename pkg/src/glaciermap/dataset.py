"""Tiles, feature groups, data tracks, splits and a synthetic scene generator."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import geotiff

NUM_CLASSES = 2

GROUP_BANDS = {
    "optical": ("blue", "green", "red", "nir", "swir1", "swir2"),
    "dem": ("elevation", "slope"),
    "thermal": ("brightness_temperature",),
    "sar": ("sigma0_co", "sigma0_cross", "coherence"),
}


class DatasetError(ValueError):
    pass


class Region(IntEnum):
    ALP = 0
    ANT = 1
    AWA = 2
    CAU = 3
    GRL = 4
    HMA = 5
    TRP = 6
    NZL = 7
    SAN = 8
    SCA = 9
    SVAL = 10
    UNKNOWN = 11

    @classmethod
    def parse(cls, value) -> "Region":
        if isinstance(value, Region):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        try:
            return cls[str(value).upper()]
        except KeyError:
            # subregion names such as "HMA3" map onto their region
            stripped = str(value).upper().rstrip("0123456789")
            if stripped in cls.__members__:
                return cls[stripped]
            raise DatasetError(f"unknown region {value!r}") from None


# approximate (lat, lon) of each region, used for synthetic tiles
REGION_CENTROIDS = {
    Region.ALP: (46.5, 8.0),
    Region.ANT: (-67.5, -65.0),
    Region.AWA: (61.0, -147.0),
    Region.CAU: (43.0, 43.0),
    Region.GRL: (72.0, -40.0),
    Region.HMA: (32.0, 85.0),
    Region.TRP: (-10.0, -77.0),
    Region.NZL: (-43.5, 170.5),
    Region.SAN: (-50.0, -73.0),
    Region.SCA: (61.5, 7.0),
    Region.SVAL: (78.5, 17.0),
    Region.UNKNOWN: (0.0, 0.0),
}


@dataclass
class RasterStack:
    bands: np.ndarray
    nodata_mask: np.ndarray | None = None
    origin: tuple[float, float] = (0.0, 0.0)
    pixel_size: float = 10.0
    crs_id: str = "EPSG:32632"
    band_names: tuple[str, ...] | None = None

    def __post_init__(self):
        self.bands = np.asarray(self.bands)
        if self.bands.ndim == 2:
            self.bands = self.bands[None]
        if self.bands.ndim != 3:
            raise DatasetError(f"bands must be (band, row, col), got {self.bands.shape}")
        if self.nodata_mask is None:
            self.nodata_mask = ~np.all(np.isfinite(self.bands), axis=0)
        self.nodata_mask = np.asarray(self.nodata_mask, dtype=bool)
        if self.nodata_mask.shape != self.bands.shape[1:]:
            raise DatasetError("nodata_mask shape does not match bands")
        if not self.pixel_size > 0:
            raise DatasetError("pixel_size must be positive")
        if self.band_names is not None and len(self.band_names) != self.bands.shape[0]:
            raise DatasetError("band_names length does not match band count")

    @property
    def shape(self) -> tuple[int, int]:
        return self.bands.shape[1:]

    def band(self, name: str) -> np.ndarray:
        if self.band_names is None or name not in self.band_names:
            raise DatasetError(f"band {name} unavailable")
        return self.bands[self.band_names.index(name)]


@dataclass(frozen=True)
class InputSpec:
    """One fusion-block branch: a feature group, optionally restricted to some bands."""

    name: str
    group: str
    bands: tuple[str, ...]

    @property
    def band_count(self) -> int:
        return len(self.bands)


_OPTICAL = InputSpec("optical", "optical", GROUP_BANDS["optical"])
_DEM = InputSpec("dem", "dem", GROUP_BANDS["dem"])
_THERMAL = InputSpec("thermal", "thermal", GROUP_BANDS["thermal"])
_SAR_CO = InputSpec("sar", "sar", ("sigma0_co",))
_COHERENCE = InputSpec("coherence", "sar", ("coherence",))

TRACKS: dict[str, tuple[InputSpec, ...]] = {
    "OPT_DEM": (_OPTICAL, _DEM),
    "OPT_DEM_THERMAL": (_OPTICAL, _DEM, _THERMAL),
    # co-pol backscatter and coherence enter as separate branches: four inputs
    "OPT_DEM_INSAR": (_OPTICAL, _DEM, _SAR_CO, _COHERENCE),
}


def track_inputs(track: str) -> tuple[InputSpec, ...]:
    try:
        return TRACKS[track]
    except KeyError:
        raise DatasetError(f"unknown data track {track!r}; choose from {sorted(TRACKS)}") from None


@dataclass
class Tile:
    id: str
    split: str
    rasters: dict[str, RasterStack]
    label: np.ndarray
    region: Region = Region.UNKNOWN
    centroid: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        self.region = Region.parse(self.region)
        self.label = np.asarray(self.label)
        if self.label.ndim == 3:
            self.label = self.label[0]
        shapes = {g: r.shape for g, r in self.rasters.items()}
        shapes["label"] = self.label.shape
        if len(set(shapes.values())) > 1:
            raise DatasetError(f"{self.id}: shape mismatch {shapes}")
        origins = {r.origin for r in self.rasters.values()}
        if len(origins) > 1:
            raise DatasetError(f"{self.id}: rasters are not co-registered")
        if not np.isin(self.label, (0, 1)).all():
            raise DatasetError(f"{self.id}: label values must be 0 or 1")

    @property
    def shape(self) -> tuple[int, int]:
        return self.label.shape

    @property
    def groups(self) -> tuple[str, ...]:
        return tuple(self.rasters)

    def has_inputs(self, inputs) -> bool:
        try:
            for spec in inputs:
                _select_bands(self, spec)
        except DatasetError:
            return False
        return True


@dataclass
class Sample:
    features: dict[str, np.ndarray]
    label_onehot: np.ndarray
    location: np.ndarray | None = None
    offset: tuple[int, int] = (0, 0)

    @property
    def size(self) -> tuple[int, int]:
        return self.label_onehot.shape[1:]


def onehot(label: np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    label = np.asarray(label, dtype=np.int64)
    return (np.arange(num_classes)[:, None, None] == label[None]).astype(np.float32)


# --------------------------------------------------------------------------
# normalization

def normalize_group(group: str, bands: np.ndarray, band_names, valid: np.ndarray) -> np.ndarray:
    """Map physical units to network features; nodata pixels become 0."""
    x = np.array(bands, dtype=np.float64)
    out = np.zeros_like(x)
    for i, name in enumerate(band_names):
        b = x[i]
        if name == "elevation":
            vals = b[valid]
            mu = vals.mean() if vals.size else 0.0
            sd = vals.std() if vals.size else 1.0
            b = (b - mu) / (sd if sd > 0 else 1.0)
        elif name == "slope":
            # degrees -> tan, saturating at 45 degrees
            b = np.clip(np.tan(np.deg2rad(np.clip(b, 0.0, 89.0))), 0.0, 1.0)
        elif name.startswith("sigma0"):
            b = np.clip((b + 30.0) / 35.0, 0.0, 1.0)
        elif name == "brightness_temperature":
            b = np.clip((b - 240.0) / 60.0, 0.0, 1.0)
        else:  # reflectance, coherence
            b = np.clip(b, 0.0, 1.0)
        out[i] = np.where(valid, b, 0.0)
    return out.astype(np.float32)


def _select_bands(tile: Tile, spec: InputSpec) -> tuple[np.ndarray, RasterStack]:
    raster = tile.rasters.get(spec.group)
    if raster is None:
        raise DatasetError(f"group {spec.group} unavailable")
    names = raster.band_names or GROUP_BANDS[spec.group][: raster.bands.shape[0]]
    missing = [b for b in spec.bands if b not in names]
    if missing:
        raise DatasetError(f"group {spec.group} unavailable (missing bands {missing})")
    idx = [list(names).index(b) for b in spec.bands]
    return raster.bands[idx], raster


def tile_features(tile: Tile, inputs) -> dict[str, np.ndarray]:
    """Normalized feature arrays for each input branch, at full tile extent."""
    out = {}
    for spec in inputs:
        bands, raster = _select_bands(tile, spec)
        valid = ~raster.nodata_mask
        out[spec.name] = normalize_group(spec.group, np.nan_to_num(bands), spec.bands, valid)
    return out


def location_vector(tile: Tile, mode: str) -> np.ndarray | None:
    from .location import encode_coords, encode_region

    if mode == "none":
        return None
    if mode == "region":
        return encode_region(tile.region)
    if mode == "coord":
        return encode_coords(*tile.centroid)
    raise DatasetError(f"unknown location mode {mode!r}")


# --------------------------------------------------------------------------
# manifest

@dataclass
class TileRef:
    """Manifest entry; raster payloads are read on ``load()``."""

    id: str
    split: str
    region: Region
    centroid: tuple[float, float]
    groups: tuple[str, ...]
    paths: dict[str, Path]
    bands: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def load(self) -> Tile:
        rasters = {}
        for g in self.groups:
            data, meta = geotiff.read_geotiff(self.paths[g])
            data = data.astype(np.float32)
            if meta["nodata"] is not None:
                data[data == meta["nodata"]] = np.nan
            rasters[g] = RasterStack(
                bands=data,
                origin=meta["origin"],
                pixel_size=meta["pixel_size"],
                crs_id=meta["crs_id"],
                band_names=tuple(self.bands.get(g) or GROUP_BANDS[g][: data.shape[0]]),
            )
        label, _ = geotiff.read_geotiff(self.paths["label"])
        return Tile(self.id, self.split, rasters, label[0].astype(np.uint8), self.region, self.centroid)


def load_manifest(path) -> list[TileRef]:
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    entries = doc.get("tiles", []) if isinstance(doc, dict) else doc
    base = path.parent
    refs = []
    for e in entries:
        tid = e["id"]
        paths = {k: base / v for k, v in e["paths"].items()}
        if "label" not in paths:
            raise DatasetError(f"{tid}: no label path")
        groups = tuple(e.get("groups") or [k for k in paths if k != "label"])
        shapes = {}
        for key in (*groups, "label"):
            if key not in paths:
                raise DatasetError(f"{tid}: no path for group {key}")
            shapes[key] = geotiff.read_header(paths[key])[1:]
        if len(set(shapes.values())) > 1:
            raise DatasetError(f"{tid}: shape mismatch {shapes}")
        refs.append(
            TileRef(
                id=tid,
                split=e.get("split", "train"),
                region=Region.parse(e.get("region", "UNKNOWN")),
                centroid=tuple(e.get("centroid", (0.0, 0.0))),
                groups=groups,
                paths=paths,
                bands={k: tuple(v) for k, v in e.get("bands", {}).items()},
            )
        )
    return refs


def write_manifest(tiles, out_dir) -> Path:
    """Write tiles as GeoTIFFs plus ``manifest.json`` under ``out_dir``."""
    out_dir = Path(out_dir)
    entries = []
    for t in tiles:
        paths, bands = {}, {}
        for g, r in t.rasters.items():
            rel = f"tiles/{t.id}/{g}.tif"
            data = np.where(r.nodata_mask[None], np.float32(-9999.0), r.bands).astype(np.float32)
            geotiff.write_geotiff(out_dir / rel, data, r.origin, r.pixel_size, r.crs_id, nodata=-9999.0)
            paths[g] = rel
            bands[g] = list(r.band_names or GROUP_BANDS[g][: r.bands.shape[0]])
        ref = next(iter(t.rasters.values()))
        rel = f"tiles/{t.id}/label.tif"
        geotiff.write_geotiff(out_dir / rel, t.label.astype(np.uint8), ref.origin, ref.pixel_size, ref.crs_id)
        paths["label"] = rel
        entries.append(
            {
                "id": t.id,
                "split": t.split,
                "region": t.region.name,
                "centroid": list(t.centroid),
                "groups": list(t.rasters),
                "paths": paths,
                "bands": bands,
            }
        )
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps({"version": 1, "tiles": entries}, indent=2))
    return manifest


# --------------------------------------------------------------------------
# splitting and patches

def split_tiles(tiles, seed: int = 0, fractions=(0.6, 0.2, 0.2)):
    """Random 60/20/20 partition into (train, val, test)."""
    tiles = list(tiles)
    n = len(tiles)
    if n < 3:
        raise DatasetError(f"need at least 3 tiles to split, got {n}")
    n_val = max(1, int(np.floor(fractions[1] * n + 0.5)))
    n_test = max(1, int(np.floor(fractions[2] * n + 0.5)))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise DatasetError(f"cannot split {n} tiles")
    order = np.random.default_rng(seed).permutation(n)
    train = [tiles[i] for i in order[:n_train]]
    val = [tiles[i] for i in order[n_train:n_train + n_val]]
    test = [tiles[i] for i in order[n_train + n_val:]]
    return train, val, test


def _pad_to(arr: np.ndarray, size: int) -> np.ndarray:
    h, w = arr.shape[-2:]
    ph, pw = max(0, size - h), max(0, size - w)
    if ph == 0 and pw == 0:
        return arr
    pad = [(0, 0)] * (arr.ndim - 2) + [(0, ph), (0, pw)]
    mode = "reflect" if ph < h and pw < w else "symmetric"
    return np.pad(arr, pad, mode=mode)


def extract_patch(tile: Tile, rng: np.random.Generator, inputs=None, patch_size: int = 384,
                  location_mode: str = "none", offset=None, features=None) -> Sample:
    """Random ``patch_size`` crop, identical across inputs and label.

    Tiles smaller than the patch are reflect-padded first. ``features`` may
    carry precomputed ``tile_features`` to avoid renormalizing per patch.
    """
    inputs = track_inputs("OPT_DEM") if inputs is None else inputs
    if isinstance(inputs, str):
        inputs = track_inputs(inputs)
    feats = features if features is not None else tile_features(tile, inputs)
    for spec in inputs:
        if spec.name not in feats:
            raise DatasetError(f"group {spec.group} unavailable")
    label = _pad_to(tile.label, patch_size)
    h, w = label.shape
    if offset is None:
        offset = (int(rng.integers(0, h - patch_size + 1)), int(rng.integers(0, w - patch_size + 1)))
    r, c = offset
    crop = (slice(r, r + patch_size), slice(c, c + patch_size))
    out = {s.name: _pad_to(feats[s.name], patch_size)[(slice(None), *crop)] for s in inputs}
    return Sample(
        features=out,
        label_onehot=onehot(label[crop]),
        location=location_vector(tile, location_mode),
        offset=(r, c),
    )


def patch_grid(shape, patch_size: int, overlap: int = 0) -> list[tuple[int, int]]:
    """Upper-left offsets covering ``shape``; the last window is flush with the edge."""
    if overlap >= patch_size:
        raise ValueError("overlap must be smaller than the window")
    stride = patch_size - overlap

    def axis(n):
        if n <= patch_size:
            return [0]
        pos = list(range(0, n - patch_size + 1, stride))
        if pos[-1] != n - patch_size:
            pos.append(n - patch_size)
        return pos

    return [(r, c) for r in axis(shape[0]) for c in axis(shape[1])]


# --------------------------------------------------------------------------
# synthetic scenes

@dataclass(frozen=True)
class SynthSpec:
    size: int = 128
    n_blobs: int = 3
    debris_fraction: float = 0.0
    noise: float = 0.0
    region: str = "ALP"
    centroid: tuple[float, float] = (46.5, 8.0)
    pixel_size: float = 10.0
    origin: tuple[float, float] = (500000.0, 5200000.0)
    thermal: bool = True
    sar: bool = True
    tile_id: str = ""
    split: str = "train"


# reflectance signatures, bands (blue, green, red, nir, swir1, swir2)
_SIG_ROCK = np.array([0.10, 0.12, 0.14, 0.25, 0.28, 0.22])
_SIG_ICE = np.array([0.80, 0.78, 0.75, 0.60, 0.08, 0.05])
_SIG_DEBRIS = np.array([0.12, 0.13, 0.15, 0.22, 0.25, 0.20])

# oracle thresholds valid for noise 0
NDSI_THRESHOLD = 0.4
SLOPE_THRESHOLD_DEG = 15.0
_GLACIER_MAX_SLOPE = 12.0
_ROCK_MIN_SLOPE = 18.0


def _smooth(rng, shape, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    sd = f.std()
    return f / sd if sd > 0 else f


def _region_gain(region: Region) -> float:
    # fixed per-region illumination/sensor gain: a deterministic domain shift
    return 0.85 + 0.3 * ((int(region) * 7) % 12) / 11.0


def synth_scene(spec: SynthSpec, seed: int = 0) -> Tile:
    """Generate a deterministic synthetic tile with a glacier label.

    Clean ice is bright in the visible and dark in SWIR, glaciers are flatter
    than surrounding rock, colder, and radar-smooth with low coherence. Debris
    covers the lowest part of each glacier and looks like rock optically.
    """
    if spec.size <= 0 or spec.pixel_size <= 0:
        raise DatasetError("synthetic scene size and pixel_size must be positive")
    if not 0.0 <= spec.debris_fraction <= 1.0:
        raise DatasetError("debris_fraction must be in [0, 1]")
    rng = np.random.default_rng(seed)
    n = spec.size
    shape = (n, n)
    region = Region.parse(spec.region)
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)

    # terrain
    elev = 2500.0 + 600.0 * _smooth(rng, shape, n / 5) + 120.0 * _smooth(rng, shape, 3.0)
    label = np.zeros(shape, dtype=np.uint8)
    blob_id = np.zeros(shape, dtype=np.int32)
    for k in range(spec.n_blobs):
        cy, cx = rng.uniform(0.15, 0.85, 2) * n
        ry = rng.uniform(0.08, 0.2) * n
        rx = ry * rng.uniform(0.6, 1.4)
        th = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = (dx * np.cos(th) + dy * np.sin(th)) / rx
        v = (-dx * np.sin(th) + dy * np.cos(th)) / ry
        d = np.sqrt(u**2 + v**2) + 0.15 * np.tanh(_smooth(rng, shape, 3.0))
        inside = d < 1.0
        label[inside] = 1
        blob_id[inside & (blob_id == 0)] = k + 1
    glacier = label.astype(bool)
    smooth_elev = ndimage.gaussian_filter(elev, 4.0)
    elev = np.where(glacier, smooth_elev, elev)

    gy, gx = np.gradient(elev, spec.pixel_size)
    slope = np.rad2deg(np.arctan(np.hypot(gx, gy)))
    slope = np.where(glacier, np.minimum(slope, _GLACIER_MAX_SLOPE), np.maximum(slope, _ROCK_MIN_SLOPE))

    debris = np.zeros(shape, dtype=bool)
    if spec.debris_fraction > 0:
        for k in np.unique(blob_id[blob_id > 0]):
            cells = blob_id == k
            cut = np.quantile(elev[cells], spec.debris_fraction)
            debris |= cells & (elev <= cut)
    clean = glacier & ~debris

    tex = np.tanh(_smooth(rng, shape, 2.0))
    gain = _region_gain(region)
    optical = np.empty((6, n, n))
    for b in range(6):
        sig = np.where(clean, _SIG_ICE[b], np.where(debris, _SIG_DEBRIS[b], _SIG_ROCK[b]))
        optical[b] = gain * sig * (1.0 + 0.08 * tex)
    thermal = np.where(clean, 262.0 + 3.0 * tex, np.where(debris, 270.0 + 3.0 * tex, 278.0 + 6.0 * tex))
    speckle = np.tanh(_smooth(rng, shape, 0.7))
    sigma_co = np.where(glacier, -14.0 + 0.5 * tex, -8.0 + 3.0 * speckle)
    sigma_cross = sigma_co - 7.0
    coherence = np.where(glacier, 0.2 + 0.1 * tex, 0.7 + 0.2 * tex)

    if spec.noise > 0:
        s = spec.noise
        optical += rng.normal(0, s, optical.shape) + rng.normal(0, s / 2, (6, 1, 1))
        thermal = thermal + rng.normal(0, 20 * s, shape)
        slope = slope + rng.normal(0, 40 * s, shape)
        elev = elev + rng.normal(0, 100 * s, shape)
        sigma_co = sigma_co + rng.normal(0, 20 * s, shape)
        sigma_cross = sigma_cross + rng.normal(0, 20 * s, shape)
        coherence = coherence + rng.normal(0, s, shape)
    optical = np.clip(optical, 0.0, 1.0)
    slope = np.clip(slope, 0.0, 89.0)
    coherence = np.clip(coherence, 0.0, 1.0)

    common = dict(origin=tuple(spec.origin), pixel_size=spec.pixel_size)
    rasters = {
        "optical": RasterStack(optical.astype(np.float32), band_names=GROUP_BANDS["optical"], **common),
        "dem": RasterStack(np.stack([elev, slope]).astype(np.float32), band_names=GROUP_BANDS["dem"], **common),
    }
    if spec.thermal:
        rasters["thermal"] = RasterStack(thermal[None].astype(np.float32), band_names=GROUP_BANDS["thermal"], **common)
    if spec.sar:
        sar = np.stack([sigma_co, sigma_cross, coherence]).astype(np.float32)
        rasters["sar"] = RasterStack(sar, band_names=GROUP_BANDS["sar"], **common)
    tile_id = spec.tile_id or f"{region.name}-0-0"
    return Tile(tile_id, spec.split, rasters, label, region, tuple(spec.centroid))


def oracle_segmentation(tile: Tile) -> np.ndarray:
    """Band-ratio + slope threshold segmentation, exact on noiseless scenes."""
    opt = tile.rasters["optical"]
    green, swir = opt.band("green").astype(np.float64), opt.band("swir1").astype(np.float64)
    ndsi = (green - swir) / np.maximum(green + swir, 1e-12)
    slope = tile.rasters["dem"].band("slope")
    return ((ndsi > NDSI_THRESHOLD) | (slope < SLOPE_THRESHOLD_DEG)).astype(np.uint8)


def load_synth_spec(path) -> SynthSpec:
    from .config import load_toml

    doc = load_toml(path)
    doc = doc.get("synth", doc)
    known = SynthSpec.__dataclass_fields__
    unknown = set(doc) - set(known)
    if unknown:
        raise DatasetError(f"unknown synthetic-scene keys: {sorted(unknown)}")
    for key in ("centroid", "origin"):
        if key in doc:
            doc[key] = tuple(doc[key])
    return SynthSpec(**doc)


def synth_dataset(n_tiles: int, seed: int = 0, regions=("ALP",), base: SynthSpec | None = None) -> list[Tile]:
    """``n_tiles`` synthetic tiles cycling through ``regions``.

    Splits are drawn per region (60/20/20) when a region has at least three
    tiles, so per-region strategies have train, val and test data.
    """
    if n_tiles < 3:
        raise DatasetError("need at least 3 tiles")
    base = base or SynthSpec()
    regions = [Region.parse(r) for r in regions]
    rng = np.random.default_rng(seed)
    tiles = []
    for i in range(n_tiles):
        reg = regions[i % len(regions)]
        lat, lon = REGION_CENTROIDS[reg]
        jitter = rng.uniform(-0.5, 0.5, size=2)
        spec = replace(base, region=reg.name, tile_id=f"{reg.name.lower()}_{i:03d}",
                       centroid=(float(np.clip(lat + jitter[0], -90, 90)), float(((lon + jitter[1] + 180) % 360) - 180)))
        tiles.append(synth_scene(spec, seed=seed * 100_003 + i))
    by_region: dict[Region, list[Tile]] = {}
    for t in tiles:
        by_region.setdefault(t.region, []).append(t)
    pooled = []
    for k, (reg, group) in enumerate(sorted(by_region.items())):
        if len(group) < 3:
            pooled.extend(group)
            continue
        for name, part in zip(("train", "val", "test"), split_tiles(group, seed + k)):
            for t in part:
                t.split = name
    if pooled:
        if len(pooled) < 3:
            for t in pooled:
                t.split = "train"
        else:
            for name, part in zip(("train", "val", "test"), split_tiles(pooled, seed)):
                for t in part:
                    t.split = name
    return tiles
