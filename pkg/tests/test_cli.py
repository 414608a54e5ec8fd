import json
import os

import numpy as np
import pytest

from latentcd.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from latentcd.evaluation import save_label_mask
from latentcd.ingest import save_scene
from latentcd.store import LatentStore
from latentcd.synthetic import SyntheticSpec, generate_synthetic_series

FAST = ["--steps", "4", "--batch-size", "8", "--seed", "3"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Scenes on disk plus one trained model, shared by the pipeline tests."""
    root = tmp_path_factory.mktemp("ws")
    # change_fraction high enough that the 2x2 tile grid has a positive tile
    scenes, label = generate_synthetic_series(
        SyntheticSpec(seed=0, height=64, width=64, change_fraction=0.3))
    befores = root / "before"
    for s in scenes[:-1]:
        save_scene(s, befores / s.scene_id)
    after_dir = root / "after" / scenes[-1].scene_id
    save_scene(scenes[-1], after_dir)
    labels = root / "labels"
    labels.mkdir()
    save_label_mask(label, str(labels / label.scene_id))

    out = root / "train"
    assert main(["train", "--corpus", str(befores), "--out", str(out)] + FAST) == EXIT_OK
    return {"root": root, "befores": befores, "after": after_dir,
            "labels": labels, "weights": out / "weights.rvae",
            "scenes": scenes}


class TestTrain:
    def test_artifacts_on_disk(self, workspace):
        out = workspace["root"] / "train"
        assert workspace["weights"].exists()
        assert (out / "metrics.csv").exists()
        assert (out / "run_config.txt").exists()
        echoed = (out / "run_config.txt").read_text()
        assert "steps = 4" in echoed and "seed = 3" in echoed

    def test_repeat_run_byte_identical(self, workspace, tmp_path):
        out2 = tmp_path / "again"
        assert main(["train", "--corpus", str(workspace["befores"]),
                     "--out", str(out2)] + FAST) == EXIT_OK
        assert (out2 / "weights.rvae").read_bytes() == workspace["weights"].read_bytes()

    def test_missing_corpus_is_usage_error(self, tmp_path):
        assert main(["train", "--corpus", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "o")]) == EXIT_USAGE


@pytest.fixture(scope="module")
def store_path(workspace, tmp_path_factory):
    path = tmp_path_factory.mktemp("store") / "codes.rvls"
    for s in workspace["scenes"][:-1]:
        rc = main(["encode", "--scene", str(workspace["befores"] / s.scene_id),
                   "--weights", str(workspace["weights"]), "--store", str(path)])
        assert rc == EXIT_OK
    return path


class TestEncodeScore:
    def test_store_holds_all_befores(self, store_path):
        with LatentStore(store_path) as store:
            stats = store.stats()
            assert stats["record_count"] == 4 * 4  # 2x2 grid x 4 passes
            assert stats["per_series"] == {"synth0": 16}

    def test_score_latent_kind(self, workspace, store_path, tmp_path):
        out = tmp_path / "score"
        rc = main(["score", "--scene", str(workspace["after"]),
                   "--weights", str(workspace["weights"]), "--store", str(store_path),
                   "--out", str(out), "--kind", "cosine_latent", "--k", "3"])
        assert rc == EXIT_OK
        csvs = [f for f in os.listdir(out) if f.endswith(".csv")]
        assert len(csvs) == 1 and "cosine_latent_k3" in csvs[0]
        rows = (out / csvs[0]).read_text().strip().splitlines()
        assert len(rows) == 2 and len(rows[0].split(",")) == 2

    def test_score_repeat_identical_csv(self, workspace, store_path, tmp_path):
        args = ["score", "--scene", str(workspace["after"]),
                "--weights", str(workspace["weights"]), "--store", str(store_path),
                "--kind", "euclidean_latent"]
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(args + ["--out", str(a)]) == EXIT_OK
        assert main(args + ["--out", str(b)]) == EXIT_OK
        (csv_a,) = [f for f in os.listdir(a) if f.endswith(".csv")]
        assert (a / csv_a).read_bytes() == (b / csv_a).read_bytes()

    def test_score_input_kind_needs_no_weights(self, workspace, tmp_path):
        out = tmp_path / "score"
        args = ["score", "--scene", str(workspace["after"]), "--out", str(out),
                "--kind", "cosine_input"]
        for s in workspace["scenes"][:-1]:
            args += ["--history", str(workspace["befores"] / s.scene_id)]
        assert main(args) == EXIT_OK

    def test_score_empty_store_is_runtime_error(self, workspace, tmp_path):
        empty = tmp_path / "empty.rvls"
        LatentStore(empty).close()
        rc = main(["score", "--scene", str(workspace["after"]),
                   "--weights", str(workspace["weights"]), "--store", str(empty),
                   "--out", str(tmp_path / "o")])
        assert rc == EXIT_RUNTIME

    def test_unknown_kind_is_usage_error(self, workspace, tmp_path):
        rc = main(["score", "--scene", str(workspace["after"]),
                   "--out", str(tmp_path / "o"), "--kind", "manhattan"])
        assert rc == EXIT_USAGE

    def test_eval_and_prioritize(self, workspace, store_path, tmp_path):
        maps_dir = tmp_path / "maps"
        assert main(["score", "--scene", str(workspace["after"]),
                     "--weights", str(workspace["weights"]), "--store", str(store_path),
                     "--out", str(maps_dir)]) == EXIT_OK

        eval_out = tmp_path / "eval"
        assert main(["eval", "--maps", str(maps_dir), "--labels",
                     str(workspace["labels"]), "--out", str(eval_out)]) == EXIT_OK
        report = json.loads((eval_out / "report.json").read_text())
        assert "flood" in report["class_auprc"]
        assert 0.0 <= report["class_auprc"]["flood"] <= 1.0
        assert (eval_out / "report.txt").exists()

        (map_csv,) = [f for f in os.listdir(maps_dir) if f.endswith(".csv")]
        plan_out = tmp_path / "plan"
        assert main(["prioritize", "--maps", str(maps_dir / map_csv),
                     "--out", str(plan_out), "--budget-bytes", "40960"]) == EXIT_OK
        plan = json.loads((plan_out / "plan.json").read_text())
        assert len(plan["selected"]) == 2  # budget covers exactly two tiles
        scores = [e["score"] for e in plan["selected"]]
        assert scores == sorted(scores, reverse=True)


class TestBench:
    def test_report_fields(self, workspace, tmp_path):
        out = tmp_path / "bench"
        rc = main(["bench", "--scene", str(workspace["after"]),
                   "--weights", str(workspace["weights"]), "--out", str(out),
                   "--repetitions", "2"])
        assert rc == EXIT_OK
        report = json.loads((out / "bench.json").read_text())
        assert report["tiles"] == 4
        assert report["repetitions"] == 2
        assert report["encode_seconds_median"] > 0
        assert report["parameters"] > 0


class TestConfigHandling:
    def test_config_file_applied(self, workspace, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("steps = 2\nbatch_size = 8\nseed = 1\n")
        out = tmp_path / "out"
        assert main(["train", "--corpus", str(workspace["befores"]),
                     "--out", str(out), "--config", str(cfg)]) == EXIT_OK
        assert "steps = 2" in (out / "run_config.txt").read_text()

    def test_flag_overrides_config_file(self, workspace, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("steps = 2\nbatch_size = 8\n")
        out = tmp_path / "out"
        assert main(["train", "--corpus", str(workspace["befores"]), "--out", str(out),
                     "--config", str(cfg), "--steps", "3"]) == EXIT_OK
        assert "steps = 3" in (out / "run_config.txt").read_text()

    def test_unknown_config_key_is_usage_error(self, workspace, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("stepz = 2\n")
        rc = main(["train", "--corpus", str(workspace["befores"]),
                   "--out", str(tmp_path / "o"), "--config", str(cfg)])
        assert rc == EXIT_USAGE

    def test_malformed_value_is_usage_error(self, workspace, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("steps = many\n")
        rc = main(["train", "--corpus", str(workspace["befores"]),
                   "--out", str(tmp_path / "o"), "--config", str(cfg)])
        assert rc == EXIT_USAGE
