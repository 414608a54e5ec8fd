import numpy as np
import pytest

from latentcd import ingest
from latentcd.errors import ValidationError


def make_scene(h=64, w=64, c=10, seed=0, clouds=None, nodata=None):
    rng = np.random.default_rng(seed)
    return ingest.SceneContainer(
        scene_id=f"scene{seed}",
        timestamp=1_700_000_000.0,
        bands=rng.integers(0, 10000, size=(c, h, w)).astype(float),
        cloud_mask=clouds,
        nodata_mask=nodata,
    )


class TestSceneContainer:
    def test_negative_values_rejected(self):
        with pytest.raises(ValidationError):
            ingest.SceneContainer(scene_id="x", timestamp=0.0,
                                  bands=-np.ones((2, 8, 8)))

    def test_mask_shape_checked(self):
        from latentcd.errors import DimensionError
        with pytest.raises(DimensionError):
            ingest.SceneContainer(scene_id="x", timestamp=0.0,
                                  bands=np.ones((2, 8, 8)),
                                  cloud_mask=np.zeros((4, 4), dtype=bool))


class TestSceneIO:
    def test_round_trip(self, tmp_path):
        clouds = np.zeros((64, 64), dtype=bool)
        clouds[:8, :8] = True
        nodata = np.zeros((64, 64), dtype=bool)
        nodata[-1] = True
        scene = make_scene(clouds=clouds, nodata=nodata)
        ingest.save_scene(scene, tmp_path / "s")
        loaded = ingest.load_scene(tmp_path / "s")
        assert loaded.width == loaded.height == 64
        assert loaded.scene_id == scene.scene_id
        assert loaded.timestamp == scene.timestamp
        np.testing.assert_array_equal(loaded.bands, scene.bands)
        np.testing.assert_array_equal(loaded.cloud_mask, clouds)
        np.testing.assert_array_equal(loaded.nodata_mask, nodata)

    def test_band_count_mismatch(self, tmp_path):
        scene = make_scene()
        ingest.save_scene(scene, tmp_path / "s")
        # declare 9 bands while the file holds 10
        import json
        meta_path = tmp_path / "s" / ingest.META_NAME
        meta = json.loads(meta_path.read_text())
        meta["bands"] = 9
        meta_path.write_text(json.dumps(meta))
        with pytest.raises(ValidationError):
            ingest.load_scene(tmp_path / "s")

    def test_missing_meta(self, tmp_path):
        with pytest.raises(ValidationError):
            ingest.load_scene(tmp_path)

    def test_masks_default_false(self, tmp_path):
        scene = make_scene()
        ingest.save_scene(scene, tmp_path / "s")
        loaded = ingest.load_scene(tmp_path / "s")
        assert loaded.cloud_mask is None
        assert not loaded.nodata_mask.any()


class TestNormalize:
    def test_zero(self):
        assert ingest.normalize(0.0, 10000) == 0.0

    def test_band_max_maps_to_one(self):
        assert ingest.normalize(10000.0, 10000) == pytest.approx(1.0)

    def test_closed_form_midpoint(self):
        # ln(100)/ln(10000) = 0.5
        assert ingest.normalize(99.0, 9999.0) == pytest.approx(0.5)

    def test_negative_rejected(self):
        with pytest.raises(ValidationError):
            ingest.normalize(-1.0, 100)

    def test_monotone_and_onto(self):
        vals = np.linspace(0, 5000, 100)
        out = ingest.normalize(vals, 5000)
        assert np.all(np.diff(out) > 0)
        assert out[0] == 0.0 and out[-1] == pytest.approx(1.0)


class TestTiling:
    def test_reference_scene_counts(self):
        scene = make_scene(h=509, w=574)
        grid, tiles, _ = ingest.tile_scene(scene)
        assert (grid.rows, grid.cols) == (15, 17)
        assert tiles.shape == (255, 10, 32, 32)

    def test_single_tile_scene(self):
        grid, tiles, _ = ingest.tile_scene(make_scene(h=32, w=32))
        assert grid.count == 1 and tiles.shape[0] == 1

    def test_too_small_scene(self):
        with pytest.raises(ValidationError):
            ingest.tile_scene(make_scene(h=16, w=16))

    def test_tile_equals_window(self):
        scene = make_scene(h=96, w=96)
        grid, tiles, _ = ingest.tile_scene(scene)
        norm = ingest.normalize_scene(scene)
        a, b = 1, 2
        window = norm[:, a * 32:(a + 1) * 32, b * 32:(b + 1) * 32]
        np.testing.assert_allclose(tiles[a * grid.cols + b], window, rtol=1e-6)

    def test_tiling_partition_property(self):
        # every cropped pixel belongs to exactly one tile; sums must agree
        scene = make_scene(h=70, w=100)
        grid, tiles, _ = ingest.tile_scene(scene)
        norm = ingest.normalize_scene(scene)
        crop = norm[:, :grid.rows * 32, :grid.cols * 32]
        assert tiles.sum() == pytest.approx(crop.sum(), rel=1e-5)

    def test_cloud_fraction_counting(self):
        clouds = np.zeros((64, 64), dtype=bool)
        clouds[0, :5] = True  # 5 pixels in tile (0,0)
        scene = make_scene(clouds=clouds)
        _, _, metas = ingest.tile_scene(scene)
        assert metas.meta(0, 0).cloud_fraction == pytest.approx(5 / 1024)
        assert metas.meta(1, 1).cloud_fraction == 0.0

    def test_iter_tiles_order(self):
        scene = make_scene(h=64, w=96)
        coords = [(a, b) for a, b, _, _ in ingest.iter_tiles(scene)]
        assert coords == [(a, b) for a in range(2) for b in range(3)]


class TestScreenScene:
    def _scene_with_cloud_fraction(self, frac):
        clouds = np.zeros((64, 64), dtype=bool)
        n = int(round(frac * 64 * 64))
        clouds.ravel()[:n] = True
        return make_scene(clouds=clouds)

    def test_quarter_cloudy_rejected(self):
        assert not ingest.screen_scene(self._scene_with_cloud_fraction(0.25))

    def test_clear_accepted(self):
        assert ingest.screen_scene(self._scene_with_cloud_fraction(0.0))

    def test_exactly_threshold_accepted(self):
        # strict inequality: "greater than 20%" rejects
        assert ingest.screen_scene(self._scene_with_cloud_fraction(0.20))

    def test_absent_mask_accepts(self):
        assert ingest.screen_scene(make_scene())
