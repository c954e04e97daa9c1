import dataclasses
import io

import numpy as np
import pytest
from PIL import Image

from fmdeploy.adapt import MODES, TrainConfig, predict, train_variant
from fmdeploy.data import CROPTYPE_CLASSES
from fmdeploy.encoder import EncoderConfig, build_encoder
from fmdeploy.mapping import (
    PALETTES,
    ClassRaster,
    decode_patch_image,
    patch_arrays,
    patch_f1,
    predict_patch,
    read_patch,
    render_patch,
    write_map_outputs,
    write_patch,
)
from fmdeploy.metrics import f1_scores
from fmdeploy.splits import random_split
from fmdeploy.synth import default_patches


@pytest.fixture(scope="module")
def classifiers(small_benchmark):
    _, cropland, _, _ = small_benchmark
    split = random_split(cropland, 0.8, 0)
    enc = build_encoder(EncoderConfig(embed_dim=8, depth=1, num_heads=2, mlp_ratio=2), seed=0)
    cfg = TrainConfig(task="cropland_binary", epochs=1, ssl_epochs=1, batch_size=64, n_trees=10)
    return {m: train_variant(m, enc, cropland, split, cfg, ssl_data=cropland) for m in MODES}


@pytest.fixture(scope="module")
def patch():
    return default_patches(0, size=8)["cropland"]


@pytest.mark.parametrize("mode", MODES)
def test_predict_patch_equals_per_pixel_loop(classifiers, patch, mode):
    clf = classifiers[mode]
    raster = predict_patch(clf, patch, tile_size=3)
    h, w = patch.shape
    for r in range(h):
        for c in range(w):
            one = predict(clf, patch_arrays(patch, slice(r, r + 1), slice(c, c + 1)))
            assert raster.index[r, c] == one.index[0]
            assert raster.confidence[r, c] == one.probs[0].max()


@pytest.mark.parametrize("mode", ["finetune", "boosted_raw"])
def test_tile_size_invariance(classifiers, patch, mode):
    ref = predict_patch(classifiers[mode], patch, tile_size=8)
    for ts in (1, 2, 3, 5, 64):
        assert predict_patch(classifiers[mode], patch, tile_size=ts).equals(ref)


def test_four_by_four_tiles(classifiers):
    small = default_patches(1, size=4)["cropland"]
    clf = classifiers["finetune"]
    assert predict_patch(clf, small, 2).equals(predict_patch(clf, small, 4))


def test_uniform_patch_gives_uniform_raster(classifiers, patch):
    one = lambda a: np.broadcast_to(a[:1, :1], a.shape).copy()  # noqa: E731
    uniform = dataclasses.replace(patch, dynamic=one(patch.dynamic), mask=one(patch.mask),
                                  static=one(patch.static), pixel_size=0.0)
    for mode in ("finetune", "boosted_raw"):
        r = predict_patch(classifiers[mode], uniform, tile_size=3)
        assert (r.index == r.index[0, 0]).all() and (r.confidence == r.confidence[0, 0]).all()


def test_schema_mismatch(classifiers, patch):
    bad = dataclasses.replace(patch, dynamic=patch.dynamic[..., :4], mask=patch.mask[..., :4])
    with pytest.raises(ValueError, match="schema"):
        predict_patch(classifiers["finetune"], bad)
    with pytest.raises(ValueError):
        predict_patch(classifiers["finetune"], patch, tile_size=0)


# --- rendering -----------------------------------------------------------------------


def _raster(index, classes=("non_crop", "crop")):
    index = np.asarray(index)
    return ClassRaster(tuple(classes), index, np.full(index.shape, 0.9))


def test_render_2x2_exact_colours():
    pal = PALETTES["cropland_binary"]
    png = render_patch(_raster([[0, 1], [1, 0]]), pal)
    img = np.asarray(Image.open(io.BytesIO(png)).convert("RGB"))
    assert img.shape == (2, 2, 3)
    assert tuple(img[0, 0]) == pal["non_crop"] and tuple(img[0, 1]) == pal["crop"]
    assert png == render_patch(_raster([[0, 1], [1, 0]]), pal)


def test_render_scale_and_legend():
    png = render_patch(_raster([[0, 1], [1, 0]]), PALETTES["cropland_binary"], scale=4, legend=True)
    img = Image.open(io.BytesIO(png))
    assert img.size == (8, 12)


def test_render_missing_palette_entry():
    with pytest.raises(KeyError, match="rapeseed"):
        render_patch(_raster([[0]], ("rapeseed",)), PALETTES["cropland_binary"])


def test_decode_round_trip():
    rng = np.random.default_rng(0)
    r = _raster(rng.integers(0, 8, (5, 7)), CROPTYPE_CLASSES)
    for scale in (1, 3):
        back = decode_patch_image(render_patch(r, PALETTES["croptype_multiclass"], scale, legend=True),
                                  PALETTES["croptype_multiclass"])
        np.testing.assert_array_equal(back.index, r.index)


def test_palettes_are_distinct():
    for pal in PALETTES.values():
        assert len({tuple(v) for v in pal.values()}) == len(pal)


def test_raster_rejects_bad_index():
    with pytest.raises(ValueError):
        _raster([[0, 2]])


# --- patch F1 ------------------------------------------------------------------------


def test_patch_f1_fully_correct():
    r = _raster([[0, 1], [1, 1]])
    assert patch_f1(r, r.labels()).f1["crop"] == 1.0


def test_patch_f1_all_unknown():
    with pytest.raises(ValueError, match="no labelled"):
        patch_f1(_raster([[0, 1]]), np.array([["unknown", "unknown"]], dtype=object))


def test_patch_f1_half_labelled_subset_oracle():
    rng = np.random.default_rng(3)
    r = _raster(rng.integers(0, 2, (6, 6)))
    gt = np.where(rng.random((6, 6)) < 0.5, "crop", "non_crop").astype(object)
    gt[:3] = "unknown"
    expected = f1_scores(list(r.labels()[3:].ravel()), list(gt[3:].ravel()), r.classes)
    assert patch_f1(r, gt) == expected


def test_write_map_outputs(tmp_path, classifiers, patch):
    raster = predict_patch(classifiers["finetune"], patch)
    side = write_map_outputs(raster, tmp_path, "m", ground_truth=patch.labels_cropland)
    assert (tmp_path / "m.png").exists() and (tmp_path / "m.json").exists()
    assert sum(side["class_counts"].values()) == 64
    assert "patch_f1" in side


# --- patch files ---------------------------------------------------------------------


def test_patch_file_round_trip(tmp_path, patch):
    write_patch(patch, tmp_path / "p.bin")
    again, schema = read_patch(tmp_path / "p.bin")
    assert again.shape == patch.shape and again.timestamps == patch.timestamps
    np.testing.assert_array_equal(again.mask, patch.mask)
    np.testing.assert_array_equal(again.dynamic[patch.mask], patch.dynamic[patch.mask].astype(np.float32))
    assert (again.labels_cropland == patch.labels_cropland).all()
    write_patch(again, tmp_path / "q.bin", schema)
    assert (tmp_path / "p.bin").read_bytes() == (tmp_path / "q.bin").read_bytes()


def test_patch_file_rejects_garbage(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"NOTAPATCH")
    with pytest.raises(ValueError, match="magic"):
        read_patch(tmp_path / "x.bin")
