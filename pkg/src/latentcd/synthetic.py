"""Seeded synthetic disaster time series.

Mirrors the structure of the evaluation data: five scenes per location,
four before and one after, with a hand-free ground-truth change mask.
Scenes are composed in normalized (log-reflectance) space from smooth
material fields, then inverse-transformed to raw sensor counts:

  * shared multi-material texture across the series (the stable ground),
  * per-scene nuisance: band illumination drift (AR(1) over time),
    high-frequency speckle whose amplitude varies smoothly across the
    scene and differs between passes, and a few transient blobs that
    appear in exactly one before scene each,
  * the after scene additionally gets a spectrally shifted change region,
    which is exactly the label mask,
  * optional cloud blobs recorded in the scene cloud masks.

The transients and speckle are the point of the fixture: they create
false-positive pressure for single-pair comparisons and for raw-pixel
distances, which is what latent scoring with history is supposed to
survive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .evaluation import LabelMask
from .ingest import DEFAULT_BAND_MAX, SceneContainer

DAY = 86400.0


@dataclass(frozen=True)
class SyntheticSpec:
    seed: int = 0
    height: int = 384
    width: int = 384
    bands: int = 10
    series_length: int = 5
    event_class: str = "flood"
    # base texture
    n_materials: int = 4
    texture_scale: float = 48.0
    texture_detail: float = 0.06
    # change injection
    change_fraction: float = 0.10
    change_magnitude: float = 0.45
    # nuisance
    illumination_drift: float = 0.015
    speckle_base: float = 0.01
    speckle_peak: float = 0.12
    transient_blobs: int = 5
    transient_magnitude: float = 0.30
    transient_radius: float = 22.0
    # clouds
    cloud_blobs: int = 0
    cloud_radius: float = 40.0

    def __post_init__(self):
        if not 0.0 <= self.change_fraction < 1.0:
            raise ValidationError("change_fraction must lie in [0, 1)")
        if self.series_length < 2:
            raise ValidationError("series needs at least one before and one after scene")


def _smooth_field(rng, h, w, scale):
    """Zero-mean unit-ish smooth noise field at a given correlation scale."""
    ch = max(2, int(np.ceil(h / scale)) + 1)
    cw = max(2, int(np.ceil(w / scale)) + 1)
    coarse = rng.standard_normal((ch, cw))
    field = ndimage.zoom(coarse, (h / ch, w / cw), order=3, mode="nearest")
    field = field[:h, :w]
    return field / (field.std() + 1e-12)


def _fractal_field(rng, h, w, scale, octaves=3, persistence=0.5):
    out = np.zeros((h, w))
    amp, total = 1.0, 0.0
    for i in range(octaves):
        out += amp * _smooth_field(rng, h, w, max(2.0, scale / 2 ** i))
        total += amp
        amp *= persistence
    return out / total


def _region_of_fraction(rng, h, w, fraction, scale):
    """Spatially coherent boolean blob covering ~`fraction` of the scene."""
    if fraction <= 0.0:
        return np.zeros((h, w), dtype=bool)
    field = _fractal_field(rng, h, w, scale, octaves=2)
    cut = np.quantile(field, 1.0 - fraction)
    return field > cut


def _disk(h, w, cy, cx, radius):
    yy, xx = np.ogrid[:h, :w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2


def _unit01(field):
    lo, hi = field.min(), field.max()
    return (field - lo) / (hi - lo + 1e-12)


def generate_synthetic_series(spec):
    """Build the scene time series and its ground-truth label mask.

    Returns (scenes, label): scenes ordered oldest..newest, the last one
    marked event_role="after"; `label.change` is the injected region.
    """
    rng = np.random.default_rng(spec.seed)
    h, w, c = spec.height, spec.width, spec.bands

    # stable ground: material weight fields + per-material spectra
    spectra = rng.uniform(0.15, 0.85, size=(spec.n_materials, c))
    logits = np.stack([_fractal_field(rng, h, w, spec.texture_scale)
                       for _ in range(spec.n_materials)]) * 4.0
    weights = np.exp(logits - logits.max(axis=0))
    weights /= weights.sum(axis=0)
    base = np.einsum("mhw,mc->chw", weights, spectra)
    base += spec.texture_detail * _fractal_field(rng, h, w, 8.0, octaves=3)[None]

    # the injected change: replace the region's spectral signature
    change_region = _region_of_fraction(rng, h, w, spec.change_fraction,
                                        scale=max(h, w) / 3.0)
    change_spectrum = rng.uniform(0.15, 0.85, size=c)

    series_id = f"synth{spec.seed}"
    t0 = 1_700_000_000.0  # arbitrary fixed epoch; scenes one day apart
    scenes = []
    gain = np.zeros(c)
    for t in range(spec.series_length):
        is_after = t == spec.series_length - 1
        img = base.copy()

        if is_after:
            shifted = (1.0 - spec.change_magnitude) * img \
                + spec.change_magnitude * change_spectrum[:, None, None]
            img = np.where(change_region[None], shifted, img)
        else:
            # transient artifacts unique to this pass (glints, sediment, ...)
            for _ in range(spec.transient_blobs):
                cy, cx = rng.uniform(0, h), rng.uniform(0, w)
                r = rng.uniform(0.5, 1.0) * spec.transient_radius
                blob = _disk(h, w, cy, cx, r)
                spectrum = rng.uniform(0.15, 0.85, size=c)
                img = np.where(blob[None],
                               (1.0 - spec.transient_magnitude) * img
                               + spec.transient_magnitude * spectrum[:, None, None],
                               img)

        # illumination drift: additive per-band offset in log space, AR(1)
        gain = 0.7 * gain + rng.normal(0.0, spec.illumination_drift, size=c)
        img = img + gain[:, None, None]

        # speckle with smoothly varying, per-pass amplitude
        amp = spec.speckle_base + (spec.speckle_peak - spec.speckle_base) \
            * _unit01(_fractal_field(rng, h, w, max(h, w) / 4.0, octaves=2))
        img = img + rng.standard_normal((c, h, w)) * amp[None]

        cloud_mask = None
        if spec.cloud_blobs:
            cloud_mask = np.zeros((h, w), dtype=bool)
            for _ in range(spec.cloud_blobs):
                cy, cx = rng.uniform(0, h), rng.uniform(0, w)
                cloud_mask |= _disk(h, w, cy, cx, rng.uniform(0.5, 1.0) * spec.cloud_radius)
            img = np.where(cloud_mask[None], 0.92 + 0.03 * rng.standard_normal((c, h, w)), img)

        img = np.clip(img, 0.0, 1.0)
        raw = np.expm1(img * np.log1p(DEFAULT_BAND_MAX))
        scenes.append(SceneContainer(
            scene_id=f"{series_id}-t{t}",
            series_id=series_id,
            timestamp=t0 + t * DAY,
            bands=raw,
            cloud_mask=cloud_mask,
            event_role="after" if is_after else "before",
        ))

    label = LabelMask(scene_id=scenes[-1].scene_id, change=change_region,
                      event_class=spec.event_class)
    return scenes, label


def corpus_from_series(series_list):
    """Stack the before-scene tiles of several series into one training set."""
    from .ingest import tile_scene

    chunks = []
    for scenes in series_list:
        for scene in scenes:
            if scene.event_role == "after":
                continue
            _, tiles, _ = tile_scene(scene)
            chunks.append(tiles)
    return np.concatenate(chunks, axis=0)
