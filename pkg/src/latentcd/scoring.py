"""Change scoring: pairwise distances and the history-minimum score.

A tile's change score against its history is the minimum pairwise
distance between the current representation and each of the k most
recent past representations. Latent kinds compare encoded Gaussians
(means for cosine/euclidean, full distributions for KL); input kinds
compare flattened normalized pixels and need no model at all.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import ingest
from .errors import DimensionError, NumericError
from .model import LatentCode

LATENT_KINDS = ("cosine_latent", "euclidean_latent", "kl_latent")
INPUT_KINDS = ("cosine_input", "euclidean_input")
ALL_KINDS = LATENT_KINDS + INPUT_KINDS

# zero-vector cosine fallbacks are rare but worth surfacing
zero_vector_events = 0


def distance_cosine(u, v):
    """1 - cosine similarity, in [0, 2]; zero vectors map to 1.0."""
    global zero_vector_events
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DimensionError(f"vector lengths differ: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        zero_vector_events += 1
        return 1.0
    return float(np.clip(1.0 - (u @ v) / (nu * nv), 0.0, 2.0))


def distance_euclidean(u, v):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DimensionError(f"vector lengths differ: {u.shape} vs {v.shape}")
    return float(np.linalg.norm(u - v))


def distance_kl(p, q):
    """Directed KL(p || q) between diagonal-Gaussian latent codes."""
    if p.n != q.n:
        raise DimensionError(f"latent sizes differ: {p.n} vs {q.n}")
    lvp = p.log_var.astype(np.float64)
    lvq = q.log_var.astype(np.float64)
    var_p, var_q = np.exp(lvp), np.exp(lvq)
    mu_diff = p.mu.astype(np.float64) - q.mu.astype(np.float64)
    kl = float(np.sum(0.5 * (lvq - lvp) + (var_p + mu_diff ** 2) / (2.0 * var_q) - 0.5))
    if not np.isfinite(kl):
        raise NumericError("non-finite KL divergence")
    return max(kl, 0.0)


def distance_jeffreys(p, q):
    """Symmetrised KL, available behind the kl direction config flag."""
    return 0.5 * (distance_kl(p, q) + distance_kl(q, p))


def pair_distance(current, past, kind, symmetric_kl=False):
    """Distance between two tile representations for the given kind.

    Latent kinds expect LatentCode; input kinds expect flat pixel vectors.
    """
    if kind == "kl_latent":
        return distance_jeffreys(current, past) if symmetric_kl else distance_kl(current, past)
    if kind in ("cosine_latent", "euclidean_latent"):
        u, v = current.mu, past.mu
    elif kind in INPUT_KINDS:
        u, v = np.ravel(current), np.ravel(past)
    else:
        raise ValueError(f"unknown distance kind '{kind}'")
    if kind.startswith("cosine"):
        return distance_cosine(u, v)
    return distance_euclidean(u, v)


def score_series(current, history, kind, k=None, symmetric_kl=False):
    """Minimum distance from `current` to the (up to k) most recent entries.

    `history` is ordered newest first. Returns None when no usable history
    remains (the excluded sentinel).
    """
    usable = list(history if k is None else history[:k])
    if not usable:
        return None
    return min(pair_distance(current, past, kind, symmetric_kl) for past in usable)


@dataclass
class MaskPolicy:
    """Cloud/nodata handling during scoring.

    The after tile and the most recent before tile exclude the tile
    outright when contaminated beyond `exclude_threshold`; older history
    frames are merely skipped inside the min when beyond `history_skip`.
    """
    exclude_threshold: float = 0.0
    history_skip: float = 0.5

    def tile_excluded(self, meta):
        return (meta.cloud_fraction > self.exclude_threshold
                or meta.nodata_fraction > self.exclude_threshold)

    def history_usable(self, meta):
        return (meta.cloud_fraction <= self.history_skip
                and meta.nodata_fraction <= self.history_skip)


@dataclass
class ChangeMap:
    """Per-tile change scores for one scene; NaN marks excluded tiles."""
    scene_id: str
    scores: np.ndarray  # (rows, cols) float, NaN = excluded
    kind: str
    k: int
    extra: dict = field(default_factory=dict)

    @property
    def rows(self):
        return self.scores.shape[0]

    @property
    def cols(self):
        return self.scores.shape[1]

    def excluded_count(self):
        return int(np.isnan(self.scores).sum())


def _encode_scene_codes(scene, vae, batch=64):
    """LatentCodes for every tile of a scene, grid order; pixels discarded."""
    grid, tiles, metas = ingest.tile_scene(scene)
    mus, lvs = [], []
    for i in range(0, len(tiles), batch):
        mu, lv = vae.encode_raw(tiles[i:i + batch], mode="infer")
        mus.append(mu)
        lvs.append(lv)
    mu = np.concatenate(mus)
    lv = np.concatenate(lvs)
    codes = [LatentCode(mu[i], lv[i]) for i in range(grid.count)]
    return grid, codes, metas


def _scene_representations(scene, kind, vae):
    if kind in LATENT_KINDS:
        if vae is None:
            raise ValueError(f"distance kind '{kind}' requires model weights")
        return _encode_scene_codes(scene, vae)
    grid, tiles, metas = ingest.tile_scene(scene)
    reps = [tiles[i].ravel() for i in range(grid.count)]
    return grid, reps, metas


def change_map(scene, history_scenes, vae=None, kind="cosine_latent", k=3,
               policy=None, symmetric_kl=False):
    """Score one scene against a list of earlier scenes (oldest..newest).

    History scenes are reduced to per-tile representations first (for
    latent kinds that means latent codes only; past pixels are not kept).
    """
    policy = policy or MaskPolicy()
    grid, reps, metas = _scene_representations(scene, kind, vae)
    hist = []
    for past in history_scenes:
        g, r, m = _scene_representations(past, kind, vae)
        if (g.rows, g.cols) != (grid.rows, grid.cols):
            raise DimensionError(
                f"scene grids differ: {scene.scene_id} {grid.rows}x{grid.cols} vs "
                f"{past.scene_id} {g.rows}x{g.cols}")
        hist.append((r, m))
    hist.reverse()  # newest first

    scores = np.full((grid.rows, grid.cols), np.nan)
    for idx in range(grid.count):
        a, b = divmod(idx, grid.cols)
        meta = metas.meta(a, b)
        if policy.tile_excluded(meta):
            continue
        if hist and policy.tile_excluded(hist[0][1].meta(a, b)):
            continue  # most recent before image clouded: tile is excluded
        usable = [r[idx] for r, m in hist[:k] if policy.history_usable(m.meta(a, b))]
        s = score_series(reps[idx], usable, kind, k=k, symmetric_kl=symmetric_kl)
        if s is not None:
            scores[a, b] = s
    return ChangeMap(scene_id=scene.scene_id, scores=scores, kind=kind, k=k)


def change_map_from_codes(scene_id, grid, current, histories, metas, kind="cosine_latent",
                          k=3, policy=None, symmetric_kl=False):
    """Score from stored latent codes: `histories[idx]` is newest-first."""
    policy = policy or MaskPolicy()
    scores = np.full((grid.rows, grid.cols), np.nan)
    for idx in range(grid.count):
        a, b = divmod(idx, grid.cols)
        if metas is not None and policy.tile_excluded(metas.meta(a, b)):
            continue
        s = score_series(current[idx], histories[idx], kind, k=k, symmetric_kl=symmetric_kl)
        if s is not None:
            scores[a, b] = s
    return ChangeMap(scene_id=scene_id, scores=scores, kind=kind, k=k)


# ---------------------------------------------------------------------------
# Serialization: CSV grid + JSON sidecar + grayscale rendering
# ---------------------------------------------------------------------------

def save_change_map(cm, basepath):
    """Write <base>.csv, <base>.json and <base>.png; returns the csv path."""
    csv_path = basepath + ".csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        for row in cm.scores:
            writer.writerow(["NA" if np.isnan(v) else repr(float(v)) for v in row])
    sidecar = {"scene_id": cm.scene_id, "kind": cm.kind, "k": cm.k,
               "rows": cm.rows, "cols": cm.cols,
               "excluded": cm.excluded_count(), **cm.extra}
    with open(basepath + ".json", "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
    render_change_map(cm, basepath + ".png")
    return csv_path


def render_change_map(cm, png_path):
    """8-bit grayscale quick-look; excluded tiles render mid-gray."""
    from PIL import Image

    finite = cm.scores[np.isfinite(cm.scores)]
    lo = float(finite.min()) if finite.size else 0.0
    hi = float(finite.max()) if finite.size else 1.0
    span = hi - lo if hi > lo else 1.0
    img = np.full(cm.scores.shape, 127, dtype=np.uint8)
    mask = np.isfinite(cm.scores)
    img[mask] = np.rint(255.0 * (cm.scores[mask] - lo) / span).astype(np.uint8)
    Image.fromarray(img, mode="L").save(png_path)


def load_change_map(csv_path):
    base = csv_path[:-4] if csv_path.endswith(".csv") else csv_path
    with open(base + ".json") as f:
        sidecar = json.load(f)
    rows = []
    with open(base + ".csv", newline="") as f:
        for row in csv.reader(f):
            rows.append([np.nan if v == "NA" else float(v) for v in row])
    scores = np.asarray(rows, dtype=float)
    extra = {k: v for k, v in sidecar.items()
             if k not in ("scene_id", "kind", "k", "rows", "cols", "excluded")}
    return ChangeMap(scene_id=sidecar["scene_id"], scores=scores,
                     kind=sidecar["kind"], k=sidecar["k"], extra=extra)
