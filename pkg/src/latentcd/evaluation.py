"""Tile-wise precision-recall evaluation.

Each tile is one positive/negative example: the pixel change mask is
reduced to a tile label by its changed fraction, cloudy tiles (after
image or most recent before image) are excluded, and tiles are pooled
across the scenes of an event class into a single curve per class.
AUPRC is average precision (step integration over ranked thresholds,
ties grouped), not trapezoidal interpolation.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ValidationError
from .ingest import TILE, _pack_mask, _unpack_mask

EVENT_CLASSES = ("landslide", "flood", "hurricane", "fire")


@dataclass
class LabelMask:
    """Hand-annotation analogue: pixel change mask for the final pair."""
    scene_id: str
    change: np.ndarray  # bool (H, W)
    event_class: str = "flood"
    cloud: np.ndarray | None = None

    def __post_init__(self):
        self.change = np.asarray(self.change, dtype=bool)
        if self.change.ndim != 2:
            raise DimensionError("change mask must be 2-D")


def tile_label(window, positive_fraction_threshold=0.5):
    """Tile is positive iff its changed-pixel fraction >= threshold."""
    window = np.asarray(window)
    return bool(window.mean() >= positive_fraction_threshold)


def tile_labels(mask, rows, cols, positive_fraction_threshold=0.5):
    """(rows, cols) boolean label grid from a pixel mask."""
    change = np.asarray(mask.change if isinstance(mask, LabelMask) else mask, dtype=float)
    if change.shape[0] < rows * TILE or change.shape[1] < cols * TILE:
        raise DimensionError(
            f"mask {change.shape} smaller than tile grid {rows}x{cols} of {TILE}px")
    crop = change[:rows * TILE, :cols * TILE]
    frac = crop.reshape(rows, TILE, cols, TILE).mean(axis=(1, 3))
    return frac >= positive_fraction_threshold


def exclusion_mask(after_meta, most_recent_before_meta, cloud_fraction_threshold=0.0):
    """Excluded iff clouds in the after tile or the most recent before tile.

    Older history frames never cause exclusion; this mirrors the tile-wise
    protocol exactly.
    """
    after = np.asarray(after_meta.cloud_fraction if hasattr(after_meta, "cloud_fraction")
                       else after_meta, dtype=float)
    before = np.asarray(most_recent_before_meta.cloud_fraction
                        if hasattr(most_recent_before_meta, "cloud_fraction")
                        else most_recent_before_meta, dtype=float)
    if after.shape != before.shape:
        raise DimensionError("after/before tile meta grids differ in shape")
    return (after > cloud_fraction_threshold) | (before > cloud_fraction_threshold)


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    thresholds: np.ndarray
    positive_count: int
    negative_count: int


def pr_curve(scored_labels, scene_id="<pooled>"):
    """Precision-recall curve over (score, label) pairs.

    Scores are ranked descending; equal scores collapse into one threshold
    step so tie order cannot affect the curve.
    """
    pairs = [(float(s), bool(l)) for s, l in scored_labels]
    pos = sum(1 for _, l in pairs if l)
    neg = len(pairs) - pos
    if pos == 0 or neg == 0:
        raise ValidationError(
            f"degenerate label set for {scene_id}: {pos} positives, {neg} negatives")
    scores = np.array([s for s, _ in pairs])
    labels = np.array([l for _, l in pairs])
    order = np.argsort(-scores, kind="stable")
    scores, labels = scores[order], labels[order]

    # indices where a new (lower) score starts: end of each tie group
    distinct = np.flatnonzero(np.diff(scores)) if len(scores) > 1 else np.array([], dtype=int)
    group_ends = np.concatenate([distinct, [len(scores) - 1]])
    tp = np.cumsum(labels)[group_ends]
    count = group_ends + 1
    precision = tp / count
    recall = tp / pos
    return PRCurve(recall=recall, precision=precision, thresholds=scores[group_ends],
                   positive_count=pos, negative_count=neg)


def auprc(curve):
    """Average precision: sum of (R_i - R_{i-1}) * P_i over threshold steps."""
    r = np.concatenate([[0.0], curve.recall])
    return float(np.sum(np.diff(r) * curve.precision))


@dataclass
class SceneEval:
    scene_id: str
    event_class: str
    total_tiles: int
    scored_tiles: int
    excluded_tiles: int
    positive_tiles: int

    @property
    def positive_ratio(self):
        return self.positive_tiles / self.scored_tiles if self.scored_tiles else float("nan")


@dataclass
class EvalReport:
    class_auprc: dict  # event_class -> AUPRC (pooled or macro-averaged)
    scenes: list = field(default_factory=list)  # SceneEval entries
    config: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def to_dict(self):
        return {
            "class_auprc": self.class_auprc,
            "scenes": [{
                "scene_id": s.scene_id, "event_class": s.event_class,
                "total_tiles": s.total_tiles, "scored_tiles": s.scored_tiles,
                "excluded_tiles": s.excluded_tiles, "positive_tiles": s.positive_tiles,
                "positive_ratio": s.positive_ratio,
            } for s in self.scenes],
            "config": self.config,
            "warnings": self.warnings,
        }

    def to_table(self):
        lines = ["Event class        AUPRC", "-" * 26]
        for cls, value in sorted(self.class_auprc.items()):
            lines.append(f"{cls:<18} {value:.3f}")
        lines.append("")
        lines.append("Scene              class       tiles  scored  excl  pos ratio")
        for s in self.scenes:
            lines.append(f"{s.scene_id:<18} {s.event_class:<10} {s.total_tiles:>6} "
                         f"{s.scored_tiles:>7} {s.excluded_tiles:>5} {s.positive_ratio:>9.3f}")
        return "\n".join(lines)


def evaluate(change_maps, label_masks, positive_fraction_threshold=0.5,
             per_scene_average=False):
    """Pool tiles per event class and compute one AUPRC per class.

    `change_maps` score excluded tiles as NaN (exclusion applied upstream);
    `label_masks` maps scene_id -> LabelMask. With `per_scene_average` the
    per-class number is the macro average of per-scene AUPRCs instead of
    the pooled-tile value.
    """
    if isinstance(label_masks, dict):
        mask_for = label_masks.get
    else:
        by_id = {m.scene_id: m for m in label_masks}
        mask_for = by_id.get

    pooled = {}
    per_scene = {}
    scenes = []
    warnings = []
    for cm in change_maps:
        mask = mask_for(cm.scene_id)
        if mask is None:
            raise ValidationError(f"no label mask for scene '{cm.scene_id}'")
        labels = tile_labels(mask, cm.rows, cm.cols, positive_fraction_threshold)
        finite = np.isfinite(cm.scores)
        excluded = int((~finite).sum())
        pairs = list(zip(cm.scores[finite].tolist(), labels[finite].tolist()))
        scenes.append(SceneEval(
            scene_id=cm.scene_id, event_class=mask.event_class,
            total_tiles=cm.scores.size, scored_tiles=len(pairs),
            excluded_tiles=excluded,
            positive_tiles=int(sum(l for _, l in pairs))))
        if not pairs:
            warnings.append(f"scene '{cm.scene_id}': all tiles excluded")
            continue
        pooled.setdefault(mask.event_class, []).extend(pairs)
        per_scene.setdefault(mask.event_class, []).append((cm.scene_id, pairs))

    class_auprc = {}
    for cls, pairs in pooled.items():
        if per_scene_average:
            values = []
            for scene_id, sp in per_scene[cls]:
                try:
                    values.append(auprc(pr_curve(sp, scene_id)))
                except ValidationError as e:
                    warnings.append(str(e))
            class_auprc[cls] = float(np.mean(values)) if values else float("nan")
        else:
            class_auprc[cls] = auprc(pr_curve(pairs, f"class '{cls}'"))
    return EvalReport(class_auprc=class_auprc, scenes=scenes,
                      config={"positive_fraction_threshold": positive_fraction_threshold,
                              "per_scene_average": per_scene_average},
                      warnings=warnings)


# ---------------------------------------------------------------------------
# Label mask files: packed bitmask + JSON sidecar (same bit layout as the
# scene cloud masks).
# ---------------------------------------------------------------------------

def save_label_mask(mask, basepath):
    h, w = mask.change.shape
    with open(basepath + ".label.bits", "wb") as f:
        f.write(_pack_mask(mask.change))
    with open(basepath + ".label.json", "w") as f:
        json.dump({"scene_id": mask.scene_id, "event_class": mask.event_class,
                   "height": h, "width": w}, f, indent=2)


def load_label_mask(basepath):
    with open(basepath + ".label.json") as f:
        meta = json.load(f)
    with open(basepath + ".label.bits", "rb") as f:
        change = _unpack_mask(f.read(), meta["height"], meta["width"])
    return LabelMask(scene_id=meta["scene_id"], change=change,
                     event_class=meta["event_class"])


def load_label_masks(directory):
    masks = {}
    for name in sorted(os.listdir(directory)):
        if name.endswith(".label.json"):
            base = os.path.join(directory, name[:-len(".label.json")])
            mask = load_label_mask(base)
            masks[mask.scene_id] = mask
    return masks
