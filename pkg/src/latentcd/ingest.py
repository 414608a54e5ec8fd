"""Scene loading, band normalization and 32x32 tile extraction.

A scene lives in a directory:
  meta.json   - scene_id, series_id, RFC 3339 timestamp, dims, band count,
                resolution, optional per-band band_max overrides, event_role
  bands.u16   - raw band-sequential little-endian uint16 raster (C x H x W)
  cloud.bits  - optional packed 1-bit-per-pixel cloud mask (row-major)
  nodata.bits - optional packed nodata mask, same layout

Cloud masks are consumed, never computed here; absent masks default to
all-false.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

from .errors import DimensionError, ValidationError

TILE = 32
DEFAULT_BAND_MAX = 10000.0  # Sentinel-2 L1C reflectance scaling convention
META_NAME = "meta.json"
BANDS_NAME = "bands.u16"
CLOUD_NAME = "cloud.bits"
NODATA_NAME = "nodata.bits"


@dataclass
class SceneContainer:
    scene_id: str
    timestamp: float  # UTC epoch seconds
    bands: np.ndarray  # (C, H, W) raw sensor values, non-negative
    resolution_m: float = 10.0
    cloud_mask: np.ndarray | None = None  # bool (H, W)
    nodata_mask: np.ndarray | None = None
    band_max: np.ndarray | None = None  # per-band normalization ceiling
    event_role: str = "before"  # before|after
    series_id: str | None = None

    def __post_init__(self):
        self.bands = np.asarray(self.bands)
        if self.bands.ndim != 3:
            raise DimensionError(f"bands must be (C,H,W), got {self.bands.shape}")
        if np.any(self.bands < 0):
            raise ValidationError("band values must be non-negative")
        h, w = self.bands.shape[1:]
        if self.nodata_mask is None:
            self.nodata_mask = np.zeros((h, w), dtype=bool)
        for name, mask in (("cloud", self.cloud_mask), ("nodata", self.nodata_mask)):
            if mask is not None and mask.shape != (h, w):
                raise DimensionError(f"{name} mask shape {mask.shape} != scene {(h, w)}")
        if self.band_max is None:
            self.band_max = np.full(self.bands.shape[0], DEFAULT_BAND_MAX)
        else:
            self.band_max = np.asarray(self.band_max, dtype=float)
            if self.band_max.shape != (self.bands.shape[0],):
                raise DimensionError("band_max must have one entry per band")
            if np.any(self.band_max <= 0):
                raise ValidationError("band_max entries must be positive")
        if self.series_id is None:
            self.series_id = self.scene_id

    @property
    def n_bands(self):
        return self.bands.shape[0]

    @property
    def height(self):
        return self.bands.shape[1]

    @property
    def width(self):
        return self.bands.shape[2]

    def cloud_fraction(self):
        if self.cloud_mask is None:
            return 0.0
        return float(self.cloud_mask.mean())


@dataclass(frozen=True)
class TileGrid:
    rows: int
    cols: int
    tile_size: int = TILE

    @property
    def count(self):
        return self.rows * self.cols

    def origin(self, a, b):
        return a * self.tile_size, b * self.tile_size


@dataclass(frozen=True)
class TileMeta:
    cloud_fraction: float
    nodata_fraction: float


@dataclass
class TileMetaGrid:
    """Per-tile mask statistics for one scene."""
    cloud_fraction: np.ndarray  # (rows, cols) in [0,1]
    nodata_fraction: np.ndarray

    def meta(self, a, b):
        return TileMeta(float(self.cloud_fraction[a, b]), float(self.nodata_fraction[a, b]))


def _parse_timestamp(text):
    return datetime.fromisoformat(text.replace("Z", "+00:00")).timestamp()


def format_timestamp(epoch_seconds):
    return datetime.fromtimestamp(epoch_seconds, tz=timezone.utc).isoformat().replace("+00:00", "Z")


def _pack_mask(mask):
    return np.packbits(mask.astype(np.uint8), axis=None).tobytes()


def _unpack_mask(data, h, w):
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=h * w)
    return bits.reshape(h, w).astype(bool)


def save_scene(scene, path):
    """Write a scene directory in the container layout described above."""
    os.makedirs(path, exist_ok=True)
    meta = {
        "scene_id": scene.scene_id,
        "series_id": scene.series_id,
        "timestamp": format_timestamp(scene.timestamp),
        "width": scene.width,
        "height": scene.height,
        "bands": scene.n_bands,
        "resolution_m": scene.resolution_m,
        "band_max": scene.band_max.tolist(),
        "event_role": scene.event_role,
        "has_cloud_mask": scene.cloud_mask is not None,
        "has_nodata_mask": bool(scene.nodata_mask.any()),
    }
    with open(os.path.join(path, META_NAME), "w") as f:
        json.dump(meta, f, indent=2)
    raw = np.clip(np.rint(scene.bands), 0, 65535).astype("<u2")
    with open(os.path.join(path, BANDS_NAME), "wb") as f:
        f.write(raw.tobytes())
    if scene.cloud_mask is not None:
        with open(os.path.join(path, CLOUD_NAME), "wb") as f:
            f.write(_pack_mask(scene.cloud_mask))
    if scene.nodata_mask.any():
        with open(os.path.join(path, NODATA_NAME), "wb") as f:
            f.write(_pack_mask(scene.nodata_mask))


def load_scene(path):
    meta_path = os.path.join(path, META_NAME)
    try:
        with open(meta_path) as f:
            meta = json.load(f)
    except FileNotFoundError:
        raise ValidationError(f"{path}: missing {META_NAME}")
    except json.JSONDecodeError as e:
        raise ValidationError(f"{meta_path}: malformed header: {e}")
    for key in ("scene_id", "timestamp", "width", "height", "bands"):
        if key not in meta:
            raise ValidationError(f"{meta_path}: missing required key '{key}'")
    c, h, w = meta["bands"], meta["height"], meta["width"]
    raw = np.fromfile(os.path.join(path, BANDS_NAME), dtype="<u2")
    if raw.size != c * h * w:
        raise ValidationError(
            f"{path}: band file holds {raw.size} values, expected {c}x{h}x{w}={c * h * w}")
    bands = raw.reshape(c, h, w).astype(np.float64)

    cloud = None
    cloud_path = os.path.join(path, CLOUD_NAME)
    if os.path.exists(cloud_path):
        with open(cloud_path, "rb") as f:
            cloud = _unpack_mask(f.read(), h, w)
    nodata = None
    nodata_path = os.path.join(path, NODATA_NAME)
    if os.path.exists(nodata_path):
        with open(nodata_path, "rb") as f:
            nodata = _unpack_mask(f.read(), h, w)

    return SceneContainer(
        scene_id=meta["scene_id"],
        series_id=meta.get("series_id"),
        timestamp=_parse_timestamp(meta["timestamp"]),
        bands=bands,
        resolution_m=meta.get("resolution_m", 10.0),
        cloud_mask=cloud,
        nodata_mask=nodata,
        band_max=np.asarray(meta["band_max"]) if "band_max" in meta else None,
        event_role=meta.get("event_role", "before"),
    )


def normalize(raw, band_max):
    """Log-scale raw values into [0,1]: clamp(ln(1+v)/ln(1+band_max), 0, 1)."""
    raw = np.asarray(raw, dtype=np.float64)
    if np.any(raw < 0):
        raise ValidationError("normalize requires non-negative input")
    if np.any(np.asarray(band_max) <= 0):
        raise ValidationError("band_max must be positive")
    return np.clip(np.log1p(raw) / np.log1p(band_max), 0.0, 1.0)


def normalize_scene(scene):
    """Normalized (C, H, W) float array; nodata pixels forced to 0."""
    ceil = scene.band_max.reshape(-1, 1, 1)
    out = normalize(scene.bands, ceil)
    if scene.nodata_mask is not None and scene.nodata_mask.any():
        out = np.where(scene.nodata_mask[None], 0.0, out)
    return out


def tile_grid(scene):
    rows, cols = scene.height // TILE, scene.width // TILE
    if rows == 0 or cols == 0:
        raise ValidationError(
            f"scene {scene.scene_id} ({scene.height}x{scene.width}) smaller than one tile")
    return TileGrid(rows, cols)


def _window_fractions(mask, grid):
    if mask is None or not mask.any():
        return np.zeros((grid.rows, grid.cols))
    crop = mask[:grid.rows * TILE, :grid.cols * TILE].astype(float)
    return crop.reshape(grid.rows, TILE, grid.cols, TILE).mean(axis=(1, 3))


def tile_meta_grid(scene, grid=None):
    grid = grid or tile_grid(scene)
    return TileMetaGrid(
        cloud_fraction=_window_fractions(scene.cloud_mask, grid),
        nodata_fraction=_window_fractions(scene.nodata_mask, grid),
    )


def tile_scene(scene):
    """Cut the normalized scene into a non-overlapping 32x32 grid.

    Returns (grid, tiles, metas): tiles is (rows*cols, C, 32, 32) in grid
    row-major order; partial edge tiles are discarded.
    """
    grid = tile_grid(scene)
    norm = normalize_scene(scene).astype(np.float32)
    c = scene.n_bands
    crop = norm[:, :grid.rows * TILE, :grid.cols * TILE]
    # (C, rows, 32, cols, 32) -> (rows, cols, C, 32, 32) -> flat grid order
    tiles = crop.reshape(c, grid.rows, TILE, grid.cols, TILE)
    tiles = tiles.transpose(1, 3, 0, 2, 4).reshape(grid.count, c, TILE, TILE)
    return grid, np.ascontiguousarray(tiles), tile_meta_grid(scene, grid)


def iter_tiles(scene):
    """Yield (a, b, tile(1,C,32,32), TileMeta) in grid order."""
    grid, tiles, metas = tile_scene(scene)
    for idx in range(grid.count):
        a, b = divmod(idx, grid.cols)
        yield a, b, tiles[idx:idx + 1], metas.meta(a, b)


def screen_scene(scene, max_cloud_fraction=0.2):
    """Scene-level cloud screening: reject iff fraction strictly exceeds."""
    if scene.cloud_mask is None:
        return True  # absent mask: accept (caller may warn)
    return scene.cloud_fraction() <= max_cloud_fraction
