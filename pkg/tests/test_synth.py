import dataclasses
from collections import Counter

import numpy as np
import pytest

from fmdeploy.adapt import TrainConfig, predict, train_boosted_baseline
from fmdeploy.data import DEFAULT_SCHEMA, TASK_CLASSES, write_dataset
from fmdeploy.metrics import f1_scores
from fmdeploy.splits import random_split
from fmdeploy.synth import (
    PHENOLOGY,
    CountrySpec,
    SynthConfig,
    benchmark_configs,
    default_benchmark,
    field_layout,
    generate_dataset,
    generate_patch,
)


@pytest.fixture(scope="module")
def bench():
    return default_benchmark(0)


def _config(n=50, offset=0.0, mixture=None, cloud=0.3, **kw):
    mixture = mixture or {"maize": 0.5, "grassland": 0.5}
    return SynthConfig((CountrySpec("FR", n, 46.5, 2.4, phase_offset=offset, cloud_prob=cloud, class_mixture=mixture),), **kw)


def test_default_sizes(bench):
    pre, cropland, croptype, patches = bench
    assert (len(pre), len(cropland), len(croptype)) == (20_000, 8_000, 2_000)
    assert set(patches) == {"cropland", "croptype"}
    assert len({s.country for s in cropland}) >= 6
    assert all(s.label_cropland == "unknown" for s in pre)


def test_crop_fraction(bench):
    labels = bench[1].labels("cropland_binary")
    frac = labels.count("crop") / len(labels)
    assert 0.24 <= frac <= 0.28


def test_millet_fraction(bench):
    labels = bench[2].labels("croptype_multiclass")
    assert 0.01 <= labels.count("millet_sorghum") / len(labels) <= 0.02
    assert set(labels) == set(TASK_CLASSES["croptype_multiclass"])


@pytest.mark.parametrize("which", [1, 2])
def test_year_histogram(bench, which):
    years = Counter(s.year for s in bench[which])
    assert set(years) == {2017, 2018, 2019, 2020, 2021}
    assert min(years.values()) / sum(years.values()) >= 0.10


def test_label_consistency(bench):
    for s in bench[2]:
        assert s.label_cropland == "crop" and s.label_croptype != "unknown"
    for s in bench[1]:
        assert s.label_croptype == "unknown"


def test_holdout_countries_have_distinct_phase():
    cfg = benchmark_configs(0)["cropland"]
    offsets = {c.code: c.phase_offset for c in cfg.countries}
    for code in ("NG", "TZ", "ET", "AR"):
        assert abs(offsets[code]) >= 1.0


def test_determinism(tmp_path):
    cfg = _config(30)
    write_dataset(generate_dataset(cfg), tmp_path / "a.jsonl")
    write_dataset(generate_dataset(cfg), tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    write_dataset(generate_dataset(dataclasses.replace(cfg, seed=1)), tmp_path / "c.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() != (tmp_path / "c.jsonl").read_bytes()


def test_zero_count_country_absent():
    cfg = _config(20)
    cfg = dataclasses.replace(cfg, countries=cfg.countries + (CountrySpec("ES", 0, 40.0, -3.0),))
    assert {s.country for s in generate_dataset(cfg)} == {"FR"}


@pytest.mark.parametrize("mixture", [{"maize": 0.5, "grassland": 0.4}, {"maize": 1.2, "grassland": -0.2},
                                     {"cactus": 1.0}])
def test_invalid_mixture(mixture):
    with pytest.raises(ValueError):
        generate_dataset(_config(10, mixture=mixture))


@pytest.mark.parametrize("offset", [0.0, 2.0])
def test_maize_b08_peak_month(offset):
    # empirical argmax month of B08 over 1000 maize pixels vs the generative template
    ds = generate_dataset(_config(1000, offset=offset, mixture={"maize": 1.0}, cloud=0.0))
    b08 = DEFAULT_SCHEMA.dynamic_bands.index("B08")
    a = ds.arrays
    peak = a.months[np.arange(len(ds)), np.argmax(a.dynamic[:, :, b08], axis=1)]
    target = (PHENOLOGY["maize"].peak_month + offset) % 12
    circ = np.angle(np.exp(2j * np.pi * peak / 12).mean()) * 12 / (2 * np.pi) % 12
    assert abs(circ - target) <= 0.5


def test_uniform_patch_low_variance():
    cfg = _config(10)
    layout = [["maize"] * 8 for _ in range(8)]
    p = generate_patch(cfg, layout, "FR", patch_id="u")
    mixed = generate_patch(cfg, field_layout(8, 8, ("maize", "grassland", "bare"), 2, seed=1), "FR", patch_id="m")

    def spread(patch):
        d = np.where(patch.mask, patch.dynamic, np.nan)
        per_pixel = np.nanmean(d, axis=2)  # [H, W, B]
        return np.nanvar(per_pixel.reshape(-1, per_pixel.shape[-1]), axis=0)

    s2 = DEFAULT_SCHEMA.group_slices("dynamic")["S2"]
    assert (spread(p)[s2] < 1e-3).all()
    assert spread(p)[s2].sum() < spread(mixed)[s2].sum()


def test_checkerboard_ground_truth():
    layout = [["maize" if (r + c) % 2 == 0 else "soybeans" for c in range(6)] for r in range(6)]
    p = generate_patch(_config(10), layout, "FR", patch_id="cb")
    assert (p.labels_croptype == np.array(layout, dtype=object)).all()
    assert (p.labels_cropland == "crop").all()


def test_patch_determinism_and_errors():
    cfg = _config(10)
    layout = field_layout(4, 4, ("maize", "forest"), 2, seed=0)
    a, b = generate_patch(cfg, layout, "FR", patch_id="x"), generate_patch(cfg, layout, "FR", patch_id="x")
    np.testing.assert_array_equal(a.dynamic, b.dynamic)
    with pytest.raises(ValueError, match="invalid layout"):
        generate_patch(cfg, [["maize", "cactus"]], "FR")
    with pytest.raises(ValueError):
        generate_patch(cfg, layout, "XX")


def test_config_from_dict():
    raw = {"seed": 3, "tag": "t", "years": [2020, 2021],
           "countries": [{"code": "FR", "n_samples": 5, "lat": 46.0, "lon": 2.0,
                          "class_mixture": {"maize": 1.0}}]}
    ds = generate_dataset(SynthConfig.from_dict(raw))
    assert len(ds) == 5 and {s.year for s in ds} <= {2020, 2021}


def test_boosted_iid_separability(bench):
    task = "croptype_multiclass"
    ds = bench[2]
    sp = random_split(ds, 0.8, 0)
    clf = train_boosted_baseline(ds, sp, TrainConfig(task=task, mode="boosted_raw"))
    val = ds.subset(sp.val_ids)
    macro = f1_scores(predict(clf, val).labels, val.labels(task), TASK_CLASSES[task]).macro
    print(f"boosted IID crop-type macro F1: {macro:.3f}")
    assert 0.6 <= macro <= 0.95
