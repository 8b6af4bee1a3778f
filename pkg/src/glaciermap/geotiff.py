"""Minimal GeoTIFF reader/writer on top of tifffile.

Only north-up rasters in a projected CRS are supported: the georeference is a
single tie point (upper-left corner) plus a pixel scale, and the CRS is an
EPSG code stored in ProjectedCSTypeGeoKey.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
import tifffile

_MODEL_PIXEL_SCALE = 33550
_MODEL_TIEPOINT = 33922
_GEOKEY_DIRECTORY = 34735
_GDAL_NODATA = 42113

_GT_MODEL_TYPE = 1024
_GT_RASTER_TYPE = 1025
_PROJECTED_CS_TYPE = 3072


def _epsg(crs_id: str) -> int:
    m = re.fullmatch(r"(?i)epsg:(\d+)", crs_id.strip())
    if not m:
        raise ValueError(f"unsupported CRS id {crs_id!r}; expected 'EPSG:<code>'")
    return int(m.group(1))


def write_geotiff(path, data, origin=(0.0, 0.0), pixel_size=10.0, crs_id="EPSG:32632", nodata=None):
    """Write a (bands, rows, cols) or (rows, cols) array as a GeoTIFF.

    ``origin`` is the (x, y) of the upper-left corner in projected meters.
    """
    data = np.asarray(data)
    if data.ndim == 2:
        data = data[None]
    if data.ndim != 3:
        raise ValueError(f"expected 2-D or 3-D array, got shape {data.shape}")
    keys = [
        1, 1, 0, 3,
        _GT_MODEL_TYPE, 0, 1, 1,  # projected
        _GT_RASTER_TYPE, 0, 1, 1,  # pixel is area
        _PROJECTED_CS_TYPE, 0, 1, _epsg(crs_id),
    ]
    extratags = [
        (_MODEL_PIXEL_SCALE, "d", 3, (float(pixel_size), float(pixel_size), 0.0), True),
        (_MODEL_TIEPOINT, "d", 6, (0.0, 0.0, 0.0, float(origin[0]), float(origin[1]), 0.0), True),
        (_GEOKEY_DIRECTORY, "H", len(keys), tuple(keys), True),
    ]
    if nodata is not None:
        extratags.append((_GDAL_NODATA, "s", 0, str(nodata), True))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    single = data.shape[0] == 1
    tifffile.imwrite(
        path,
        data[0] if single else data,
        photometric="minisblack",
        planarconfig=None if single else "separate",
        extratags=extratags,
        metadata=None,
    )


def read_header(path):
    """Return ``(bands, rows, cols)`` without reading pixel data."""
    with tifffile.TiffFile(path) as tif:
        shape = tif.series[0].shape
    if len(shape) == 2:
        return (1, *shape)
    return tuple(shape)


def read_geotiff(path):
    """Read a GeoTIFF; returns ``(data[bands, rows, cols], meta)``.

    ``meta`` has keys ``origin``, ``pixel_size``, ``crs_id`` and ``nodata``.
    """
    with tifffile.TiffFile(path) as tif:
        data = tif.series[0].asarray()
        tags = tif.pages[0].tags
        scale = tags.get(_MODEL_PIXEL_SCALE)
        tie = tags.get(_MODEL_TIEPOINT)
        geokeys = tags.get(_GEOKEY_DIRECTORY)
        nodata_tag = tags.get(_GDAL_NODATA)
        if scale is None or tie is None:
            raise ValueError(f"{path}: missing georeferencing tags")
        pixel_size = float(scale.value[0])
        origin = (float(tie.value[3]), float(tie.value[4]))
        crs_id = "EPSG:0"
        if geokeys is not None:
            k = list(geokeys.value)
            for i in range(4, len(k), 4):
                if k[i] == _PROJECTED_CS_TYPE:
                    crs_id = f"EPSG:{k[i + 3]}"
        nodata = None
        if nodata_tag is not None:
            nodata = float(str(nodata_tag.value).strip("\x00"))
    if data.ndim == 2:
        data = data[None]
    return data, {"origin": origin, "pixel_size": pixel_size, "crs_id": crs_id, "nodata": nodata}
