import itertools
import json
import math
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_dataset
from fmdeploy.data import Dataset
from fmdeploy.splits import (
    CROPLAND_HOLDOUT,
    CROPTYPE_HOLDOUT,
    DatasetSplit,
    SplitError,
    audit_split,
    efficiency_schedule,
    geographic_split,
    random_split,
    round_half_up,
    temporal_split,
)


def _ds(n, country="ES", year=2020):
    return make_dataset([(country, year, "crop", "maize")] * n)


def test_presets():
    assert set(CROPLAND_HOLDOUT) == {"ES", "NG", "LV", "TZ", "ET", "AR"}
    assert set(CROPTYPE_HOLDOUT) == {"ES", "LV", "AT", "BR", "TZ", "ET", "MG", "MZ", "MA", "ID"}


def test_random_80_20():
    sp = random_split(_ds(10), 0.8, seed=3)
    assert (len(sp.train_ids), len(sp.val_ids)) == (8, 2)
    assert random_split(_ds(10), 0.8, seed=3) == sp
    assert random_split(_ds(10), 0.8, seed=4) != sp


def test_rounding_rule_by_enumeration():
    # every 0 < k/2N style midpoint rounds up; compare against integer arithmetic
    for n in range(2, 30):
        for num in range(1, 20):
            r = Fraction(num, 20)
            assert round_half_up(r * n) == (2 * num * n + 20) // 40
    sp = random_split(_ds(3), 0.5, seed=0)
    assert (len(sp.train_ids), len(sp.val_ids)) == (2, 1)


@pytest.mark.parametrize("n,ratio", [(1, 0.5), (2, 0.9), (3, 0.1)])
def test_random_too_small(n, ratio):
    with pytest.raises(SplitError):
        random_split(_ds(n), ratio)


@pytest.mark.parametrize("ratio", [0.0, 1.0, -0.2])
def test_random_bad_ratio(ratio):
    with pytest.raises(SplitError):
        random_split(_ds(10), ratio)


def test_geographic_partition_example():
    ds = make_dataset([("ES", 2020, "crop", "maize")] * 3 + [("LV", 2020, "crop", "wheat")] * 2)
    sp = geographic_split(ds, {"ES"})
    assert sp.val_ids == ds.ids[:3] and sp.train_ids == ds.ids[3:]
    assert sp.holdout == {"countries": ["ES"]}


def test_geographic_empty_side():
    with pytest.raises(SplitError):
        geographic_split(_ds(3, "ES"), {"ES"})
    with pytest.raises(SplitError):
        geographic_split(_ds(3, "ES"), {"NG"})
    with pytest.raises(SplitError):
        geographic_split(_ds(3, "ES"), set())


def _years_ds():
    return make_dataset([("ES", y, "crop", "maize") for y in range(2017, 2022) for _ in range(2)])


def test_temporal_holdout_2021():
    ds = _years_ds()
    sp = temporal_split(ds, {2021})
    assert {ds[i].year for i in sp.val_ids} == {2021}
    assert len(sp.val_ids) == 2
    assert 2021 not in {ds[i].year for i in sp.train_ids}


def test_temporal_empty_val():
    with pytest.raises(SplitError):
        temporal_split(_years_ds(), {2030})


def test_split_file_round_trip(tmp_path):
    sp = random_split(_ds(10), 0.8, seed=1)
    sp.save(tmp_path / "s.json")
    raw = json.loads((tmp_path / "s.json").read_text())
    assert set(raw) == {"strategy", "seed", "holdout", "train_ids", "val_ids"}
    assert DatasetSplit.load(tmp_path / "s.json") == sp


def test_split_rejects_overlap():
    with pytest.raises(SplitError):
        DatasetSplit("random", 0, {}, ("a", "b"), ("b",))
    with pytest.raises(SplitError):
        DatasetSplit("stratified", 0, {}, ("a",), ("b",))


_countries = st.sampled_from(["ES", "NG", "LV", "AR", "FR"])
_years = st.sampled_from([2018, 2019, 2020, 2021])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(_countries, _years), min_size=2, max_size=30), st.integers(0, 99), st.randoms())
def test_partition_and_permutation_invariance(rows, seed, rnd):
    ds = make_dataset([(c, y, "crop", "maize") for c, y in rows])
    shuffled = list(ds.samples)
    rnd.shuffle(shuffled)
    ds2 = Dataset(ds.schema, tuple(shuffled))
    try:
        a = random_split(ds, 0.7, seed)
    except SplitError:
        return
    b = random_split(ds2, 0.7, seed)
    assert set(a.train_ids) == set(b.train_ids)
    assert set(a.train_ids) | set(a.val_ids) == set(ds.ids)
    for held in ({"ES"}, {"NG", "LV"}):
        try:
            g = geographic_split(ds, held)
        except SplitError:
            continue
        assert set(g.train_ids) | set(g.val_ids) == set(ds.ids)
        assert not {ds[i].country for i in g.train_ids} & held
    try:
        t = temporal_split(ds, {2021})
    except SplitError:
        return
    assert not {ds[i].year for i in t.train_ids} & {2021}
    assert set(t.train_ids) | set(t.val_ids) == set(ds.ids)


# --- label efficiency ----------------------------------------------------------------


def _eff_ds():
    return make_dataset([("NG", 2020, "crop", "maize")] * 4 + [("ES", 2020, "crop", "wheat")] * 3
                        + [("FR", 2020, "non_crop", "unknown")] * 5)


def test_schedule_sizes_and_nesting():
    ds = _eff_ds()
    base = geographic_split(ds, {"NG", "ES"})
    sch = efficiency_schedule(ds, base, {"NG"}, [0, 0.5, 1.0], seed=2)
    sizes = [len(s) for s in sch.step_id_lists]
    assert sizes == [0, 2, 4]
    # prefix nesting: enumerate consecutive pairs
    for a, b in itertools.pairwise(sch.step_id_lists):
        assert b[: len(a)] == a
    assert sch.split_at(0).train_ids == base.train_ids
    assert sch.split_at(0).val_ids == base.val_ids
    full = sch.split_at(2)
    assert not {ds[i].country for i in full.val_ids} & {"NG"}
    assert set(sch.step_id_lists[2]) <= set(full.train_ids)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.lists(st.floats(0, 1), min_size=1, max_size=6, unique=True), st.integers(0, 50))
def test_schedule_floor_sizes(n_region, fractions, seed):
    fractions = sorted(round(f, 3) for f in fractions)
    fractions = [f for i, f in enumerate(fractions) if i == 0 or f > fractions[i - 1]]
    ds = make_dataset([("NG", 2020, "crop", "maize")] * n_region + [("ES", 2020, "crop", "wheat")] * 2
                      + [("FR", 2020, "crop", "maize")] * 2)
    base = geographic_split(ds, {"NG", "ES"})
    sch = efficiency_schedule(ds, base, {"NG"}, fractions, seed=seed)
    for f, ids in zip(fractions, sch.step_id_lists):
        assert len(ids) == math.floor(Fraction(str(f)) * n_region)
    longest = sch.step_id_lists[-1]
    for ids in sch.step_id_lists:
        assert longest[: len(ids)] == ids


def test_schedule_reserved_ids_excluded():
    ds = _eff_ds()
    base = geographic_split(ds, {"NG"})
    reserved = ds.ids[:2]
    sch = efficiency_schedule(ds, base, {"NG"}, [1.0], reserved=reserved)
    assert set(sch.step_id_lists[0]) == set(ds.ids[2:4])


@pytest.mark.parametrize(
    "region,fractions",
    [({"FR"}, [0.5]), ({"NG"}, [0.5, 0.5]), ({"NG"}, [1.5]), ({"NG"}, [0.6, 0.2])],
)
def test_schedule_errors(region, fractions):
    ds = _eff_ds()
    base = geographic_split(ds, {"NG", "ES"})
    with pytest.raises(SplitError):
        efficiency_schedule(ds, base, region, fractions)


def test_schedule_full_injection_of_only_region_errors():
    ds = _eff_ds()
    base = geographic_split(ds, {"NG"})
    with pytest.raises(SplitError, match="empty"):
        efficiency_schedule(ds, base, {"NG"}, [1.0])


# --- audit ---------------------------------------------------------------------------


def _geo():
    ds = make_dataset([("ES", 2020, "crop", "maize")] * 3 + [("FR", 2020, "crop", "wheat")] * 3
                      + [("FR", 2021, "non_crop", "unknown")] * 2)
    return ds, geographic_split(ds, {"ES"})


def test_audit_pass():
    ds, sp = _geo()
    rep = audit_split(ds, sp)
    assert rep.ok and rep.purity == "pass" and rep.leakage_count == 0
    assert rep.counts_by_country["val"] == {"ES": 3}
    assert "holdout purity: pass" in rep.to_text()


def test_audit_planted_leak():
    ds, sp = _geo()
    leaked = sp.val_ids[0]
    bad = DatasetSplit("geographic", 0, sp.holdout, sp.train_ids + (leaked,), sp.val_ids[1:])
    rep = audit_split(ds, bad)
    assert rep.purity == "fail" and rep.leaked_ids == [leaked] and not rep.ok
    assert leaked in rep.to_text()


def test_audit_temporal_leak():
    ds, _ = _geo()
    sp = temporal_split(ds, {2021})
    leak = sp.val_ids[0]
    rep = audit_split(ds, DatasetSplit("temporal", 0, sp.holdout, sp.train_ids + (leak,), sp.val_ids[1:]))
    assert rep.leaked_ids == [leak]


def test_audit_coverage_warning():
    ds, sp = _geo()
    rep = audit_split(ds, sp)
    warn = [w for w in rep.warnings if w.startswith("croptype_multiclass")]
    assert warn and "maize" in warn[0] and "wheat" not in warn[0]
    assert rep.class_coverage["croptype_multiclass"]["train"]["wheat"] == 3


def test_audit_unknown_ids_reported_not_raised():
    ds, sp = _geo()
    rep = audit_split(ds, DatasetSplit("geographic", 0, sp.holdout, sp.train_ids + ("ghost",), sp.val_ids))
    assert rep.unknown_ids == ["ghost"] and not rep.ok
    json.dumps(rep.to_dict())
