"""Unsupervised change detection for multi-band satellite tiles.

A small VAE encodes 32x32 tiles into diagonal-Gaussian latent codes;
change between passes is the minimum latent-space distance to the k most
recent codes for the same location. Includes tile ingest, an append-only
latent history store, tile-wise precision-recall evaluation and a
synthetic disaster-series generator for self-contained experiments.
"""

from .evaluation import (LabelMask, auprc, evaluate, exclusion_mask, pr_curve,
                         tile_label, tile_labels)
from .ingest import (SceneContainer, TileGrid, TileMeta, load_scene, normalize,
                     save_scene, screen_scene, tile_scene)
from .model import (LatentCode, ModelConfig, PRESETS, VAE, build, count_parameters,
                    elbo_loss, load_weights, reparameterize, save_weights)
from .scoring import (ChangeMap, MaskPolicy, change_map, change_map_from_codes,
                      distance_cosine, distance_euclidean, distance_kl,
                      load_change_map, save_change_map, score_series)
from .store import LatentRecord, LatentStore
from .synthetic import SyntheticSpec, corpus_from_series, generate_synthetic_series
from .training import TrainConfig, train, verify_gradients

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
