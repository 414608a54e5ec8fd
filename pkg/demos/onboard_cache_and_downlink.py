"""The persistence side: latent cache, crash recovery, downlink budget.

Simulates several passes over the same location. Each pass is encoded and
appended to the latent store; the store keeps only the four most recent
codes per tile addressable, survives a torn trailing write, and at the end
a byte-budgeted downlink plan picks the highest-scoring tiles.

A stored code is 2x128 float32 = 1 KB, against ~20 KB for the raw uint16
tile it summarizes.
"""

import os
import tempfile

import numpy as np

from latentcd import (PRESETS, LatentCode, LatentRecord, LatentStore,
                      SyntheticSpec, TrainConfig, change_map_from_codes,
                      corpus_from_series, generate_synthetic_series, train)
from latentcd.ingest import tile_scene

scenes, label = generate_synthetic_series(SyntheticSpec(seed=2, height=128, width=128))
corpus = corpus_from_series([scenes])
vae = train(PRESETS["small"], corpus, TrainConfig(seed=0, steps=200)).vae


def encode(scene):
    grid, tiles, _ = tile_scene(scene)
    mu, lv = vae.encode_raw(tiles, mode="infer")
    return grid, mu, lv


workdir = tempfile.mkdtemp()
store_path = os.path.join(workdir, "history.rvls")

with LatentStore(store_path, k_max=4) as store:
    for scene in scenes[:-1]:
        grid, mu, lv = encode(scene)
        for idx in range(grid.count):
            a, b = divmod(idx, grid.cols)
            store.put(LatentRecord(series=scene.series_id, a=a, b=b,
                                   timestamp=scene.timestamp,
                                   code=LatentCode(mu[idx], lv[idx])))
    stats = store.stats()
    print(f"store after 4 passes: {stats['record_count']} live codes, "
          f"{stats['bytes'] / 1024:.0f} KiB on disk")

# simulate a crash mid-append: chop a few bytes off the tail
with open(store_path, "r+b") as f:
    f.truncate(os.path.getsize(store_path) - 5)

with LatentStore(store_path) as store:
    print(f"reopened after torn write: {store.stats()['record_count']} codes "
          "(damaged tail record dropped, the rest intact)")

    after = scenes[-1]
    grid, mu, lv = encode(after)
    current = [LatentCode(mu[i], lv[i]) for i in range(grid.count)]
    histories = [store.get_history(after.series_id, *divmod(i, grid.cols),
                                   k=3, before=after.timestamp)
                 for i in range(grid.count)]
    cm = change_map_from_codes(after.scene_id, grid, current, histories, None)

# greedy downlink plan: highest scores first until the budget runs out
BYTES_PER_TILE = 10 * 32 * 32 * 2  # one raw uint16 tile
BUDGET = 6 * BYTES_PER_TILE
ranked = sorted(((cm.scores[a, b], a, b) for a in range(cm.rows)
                 for b in range(cm.cols) if np.isfinite(cm.scores[a, b])),
                reverse=True)
plan = ranked[:BUDGET // BYTES_PER_TILE]
print(f"\ndownlink budget {BUDGET // 1024} KiB -> {len(plan)} tiles:")
for score, a, b in plan:
    print(f"  tile ({a},{b})  score {score:.4f}")
