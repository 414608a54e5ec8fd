"""Command-line surface: train, encode, score, eval, bench, prioritize.

Exit codes are a stable contract for pipeline callers: 0 success,
1 runtime failure, 2 usage/config error. Inputs are never mutated and
every command echoes its effective configuration next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import os
import resource
import statistics
import sys
import time

import numpy as np

from . import evaluation, ingest, scoring
from .config import build_run_config, model_config_from
from .errors import ConfigError, LatentCDError
from .model import build, load_weights, save_weights
from .store import LatentRecord, LatentStore
from .training import TrainConfig, train

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def _require(path, what):
    if not path or not os.path.exists(path):
        raise ConfigError(f"{what} path does not exist: {path!r}")
    return path


def _prepare_out(run, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    run.echo(os.path.join(out_dir, "run_config.txt"))
    return out_dir


def _load_scene_dirs(root):
    """Scene directories directly under `root` (or `root` itself)."""
    if os.path.exists(os.path.join(root, ingest.META_NAME)):
        return [root]
    dirs = [os.path.join(root, d) for d in sorted(os.listdir(root))
            if os.path.exists(os.path.join(root, d, ingest.META_NAME))]
    if not dirs:
        raise ConfigError(f"no scene directories under {root!r}")
    return dirs


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train(args, run):
    corpus_root = _require(args.corpus, "corpus")
    out = _prepare_out(run, args.out)
    tiles = []
    for scene_dir in _load_scene_dirs(corpus_root):
        scene = ingest.load_scene(scene_dir)
        if not ingest.screen_scene(scene, run.max_cloud_fraction):
            print(f"skipping {scene.scene_id}: cloud cover above "
                  f"{run.max_cloud_fraction:.0%}", file=sys.stderr)
            continue
        _, t, _ = ingest.tile_scene(scene)
        tiles.append(t)
    if not tiles:
        raise ConfigError("corpus yielded no usable scenes")
    corpus = np.concatenate(tiles, axis=0)

    model_config = model_config_from(run)
    train_config = TrainConfig(seed=run.seed, learning_rate=run.learning_rate,
                               batch_size=run.batch_size, steps=run.steps,
                               optimizer=run.optimizer,
                               checkpoint_interval=run.checkpoint_interval)
    result = train(model_config, corpus, train_config, out_dir=out,
                   log_every=max(1, run.steps // 10) if run.steps else None)
    weights_path = os.path.join(out, "weights.rvae")
    save_weights(result.vae, weights_path)
    print(f"trained {run.steps} steps on {corpus.shape[0]} tiles -> {weights_path}")
    return EXIT_OK


def cmd_encode(args, run):
    scene = ingest.load_scene(_require(args.scene, "scene"))
    vae = load_weights(_require(args.weights, "weights"))
    store_dir = os.path.dirname(os.path.abspath(args.store)) or "."
    os.makedirs(store_dir, exist_ok=True)
    run.echo(os.path.join(store_dir, "run_config.txt"))

    grid, tiles, metas = ingest.tile_scene(scene)
    mu, lv = [], []
    for i in range(0, len(tiles), 64):
        m, l = vae.encode_raw(tiles[i:i + 64], mode="infer")
        mu.append(m)
        lv.append(l)
    mu, lv = np.concatenate(mu), np.concatenate(lv)

    written = skipped = 0
    with LatentStore(args.store, k_max=run.k_max) as store:
        for idx in range(grid.count):
            a, b = divmod(idx, grid.cols)
            meta = metas.meta(a, b)
            if (meta.cloud_fraction > run.history_skip_threshold
                    or meta.nodata_fraction > run.history_skip_threshold):
                skipped += 1  # contaminated tiles never enter the history
                continue
            store.put(LatentRecord(series=scene.series_id, a=a, b=b,
                                   timestamp=scene.timestamp,
                                   code=scoring.LatentCode(mu[idx], lv[idx])))
            written += 1
    print(f"encoded {scene.scene_id}: {written} records"
          + (f" ({skipped} contaminated tiles skipped)" if skipped else ""))
    return EXIT_OK


def cmd_score(args, run):
    scene = ingest.load_scene(_require(args.scene, "scene"))
    out = _prepare_out(run, args.out)
    policy = scoring.MaskPolicy(exclude_threshold=run.cloud_threshold,
                                history_skip=run.history_skip_threshold)
    kind, k = run.kind, run.k
    if kind not in scoring.ALL_KINDS:
        raise ConfigError(f"unknown distance kind '{kind}'")

    if kind in scoring.LATENT_KINDS:
        vae = load_weights(_require(args.weights, "weights"))
        _require(args.store, "latent store")
        grid, tiles, metas = ingest.tile_scene(scene)
        mu, lv = [], []
        for i in range(0, len(tiles), 64):
            m, l = vae.encode_raw(tiles[i:i + 64], mode="infer")
            mu.append(m)
            lv.append(l)
        mu, lv = np.concatenate(mu), np.concatenate(lv)
        current = [scoring.LatentCode(mu[i], lv[i]) for i in range(grid.count)]
        with LatentStore(args.store, k_max=run.k_max) as store:
            histories = [store.get_history(scene.series_id, *divmod(i, grid.cols),
                                           k=k, before=scene.timestamp)
                         for i in range(grid.count)]
        if not any(histories):
            raise LatentCDError(
                f"no latent history for series '{scene.series_id}' in {args.store}")
        cm = scoring.change_map_from_codes(scene.scene_id, grid, current, histories,
                                           metas, kind=kind, k=k, policy=policy,
                                           symmetric_kl=run.symmetric_kl)
    else:
        if not args.history:
            raise ConfigError("input-space kinds need --history scene directories")
        history = [ingest.load_scene(_require(p, "history scene")) for p in args.history]
        history.sort(key=lambda s: s.timestamp)
        cm = scoring.change_map(scene, history, vae=None, kind=kind, k=k, policy=policy)

    base = os.path.join(out, f"{scene.scene_id}_{kind}_k{k}")
    csv_path = scoring.save_change_map(cm, base)
    print(f"change map: {csv_path} ({cm.rows}x{cm.cols}, "
          f"{cm.excluded_count()} excluded)")
    return EXIT_OK


def cmd_eval(args, run):
    out = _prepare_out(run, args.out)
    map_paths = []
    for p in args.maps:
        if os.path.isdir(p):
            map_paths += [os.path.join(p, f) for f in sorted(os.listdir(p))
                          if f.endswith(".csv")]
        else:
            map_paths.append(_require(p, "change map"))
    if not map_paths:
        raise ConfigError("no change maps given")
    maps = [scoring.load_change_map(p) for p in map_paths]
    masks = evaluation.load_label_masks(_require(args.labels, "labels"))
    report = evaluation.evaluate(maps, masks,
                                 positive_fraction_threshold=run.tile_positive_threshold,
                                 per_scene_average=run.per_scene_average)
    with open(os.path.join(out, "report.json"), "w") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
    table = report.to_table()
    with open(os.path.join(out, "report.txt"), "w") as f:
        f.write(table + "\n")
    print(table)
    return EXIT_OK


def cmd_bench(args, run):
    scene = ingest.load_scene(_require(args.scene, "scene"))
    vae = load_weights(_require(args.weights, "weights"))
    out = _prepare_out(run, args.out)
    grid, tiles, _ = ingest.tile_scene(scene)

    vae.encode_raw(tiles[:1], mode="infer")  # warm caches before timing
    timings = []
    for _ in range(max(1, run.repetitions)):
        t0 = time.perf_counter()
        for i in range(0, len(tiles), 64):
            vae.encode_raw(tiles[i:i + 64], mode="infer")
        timings.append(time.perf_counter() - t0)
    median = statistics.median(timings)
    report = {
        "scene_id": scene.scene_id,
        "tiles": grid.count,
        "hidden_channels": list(vae.config.hidden_channels),
        "extra_depth": vae.config.extra_depth,
        "parameters": vae.num_parameters(),
        "repetitions": len(timings),
        "encode_seconds_median": median,
        "encode_seconds_all": timings,
        "tiles_per_second": grid.count / median,
        "peak_rss_mb": resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0,
    }
    with open(os.path.join(out, "bench.json"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_prioritize(args, run):
    out = _prepare_out(run, args.out)
    entries = []
    for p in args.maps:
        cm = scoring.load_change_map(_require(p, "change map"))
        for a in range(cm.rows):
            for b in range(cm.cols):
                s = cm.scores[a, b]
                if np.isfinite(s):
                    entries.append({"scene_id": cm.scene_id, "a": a, "b": b,
                                    "score": float(s), "bytes": run.bytes_per_tile})
    # greedy by descending score; deterministic tie-break on location
    entries.sort(key=lambda e: (-e["score"], e["scene_id"], e["a"], e["b"]))
    selected, total = [], 0
    for e in entries:
        if total + e["bytes"] > run.budget_bytes:
            continue
        selected.append(e)
        total += e["bytes"]
    plan = {"budget_bytes": run.budget_bytes, "bytes_per_tile": run.bytes_per_tile,
            "selected_bytes": total, "candidates": len(entries), "selected": selected}
    with open(os.path.join(out, "plan.json"), "w") as f:
        json.dump(plan, f, indent=2, sort_keys=True)
    print(f"selected {len(selected)}/{len(entries)} tiles, "
          f"{total}/{run.budget_bytes} bytes")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

_FLAG_KEYS = ("model", "seed", "steps", "batch_size", "learning_rate", "optimizer",
              "latent_dim", "kind", "k", "k_max", "cloud_threshold",
              "history_skip_threshold", "tile_positive_threshold", "per_scene_average",
              "budget_bytes", "bytes_per_tile", "repetitions", "beta")


def _add_common(sub):
    sub.add_argument("--config", help="key = value config file")
    for key in _FLAG_KEYS:
        sub.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="latentcd",
        description="Unsupervised on-board change detection over 32x32 tiles")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("train", help="train a VAE on a directory of scenes")
    p.add_argument("--corpus", required=True, help="directory of scene directories")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("encode", help="append a scene's latent codes to a store")
    p.add_argument("--scene", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--store", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_encode)

    p = subs.add_parser("score", help="score a scene against its history")
    p.add_argument("--scene", required=True)
    p.add_argument("--weights", help="required for latent kinds")
    p.add_argument("--store", help="latent store (latent kinds)")
    p.add_argument("--history", action="append", default=[],
                   help="history scene directory (input kinds; repeatable)")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_score)

    p = subs.add_parser("eval", help="precision-recall evaluation of change maps")
    p.add_argument("--maps", nargs="+", required=True,
                   help="change map .csv files or directories")
    p.add_argument("--labels", required=True, help="directory of label masks")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("bench", help="time scene encoding")
    p.add_argument("--weights", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_bench)

    p = subs.add_parser("prioritize", help="greedy downlink plan from change maps")
    p.add_argument("--maps", nargs="+", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_prioritize)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = {key: getattr(args, f"cfg_{key}", None) for key in _FLAG_KEYS}
    try:
        run = build_run_config(args.config, overrides)
        return args.func(args, run)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except LatentCDError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
