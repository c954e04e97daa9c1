import json
import random
from pathlib import Path

import pytest

from fmdeploy import fixtures
from fmdeploy.data import CROPLAND_CLASSES, CROPTYPE_CLASSES
from fmdeploy.metrics import (
    EvaluationReport,
    ModelResult,
    SplitResult,
    compare_models,
    f1_scores,
    format_delta,
    model_result,
    per_country_f1,
    render_csv,
    render_json,
    render_markdown,
    render_rankings,
    render_report,
)

GOLDEN = Path(__file__).parent / "golden"


def brute_force_f1(preds, labels, classes):
    """Direct counting, one class at a time."""
    out = {}
    for c in classes:
        tp = sum(1 for p, y in zip(preds, labels) if p == c and y == c)
        fp = sum(1 for p, y in zip(preds, labels) if p == c and y != c)
        fn = sum(1 for p, y in zip(preds, labels) if p != c and y == c)
        out[c] = None if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
    return out


def _fuzz_case(rnd):
    k = rnd.randint(2, 8)
    classes = [f"c{i}" for i in range(k)]
    used = rnd.sample(classes, rnd.randint(1, k))  # leave some classes undefined
    n = rnd.randint(1, 60)
    labels = [rnd.choice(used) for _ in range(n)]
    preds = [y if rnd.random() < 0.5 else rnd.choice(used) for y in labels]
    countries = [rnd.choice("ABC") for _ in range(n)]
    return classes, preds, labels, countries


def test_f1_matches_brute_force_on_fuzzed_cases():
    rnd = random.Random(1234)
    for _ in range(1500):
        classes, preds, labels, countries = _fuzz_case(rnd)
        res = f1_scores(preds, labels, classes)
        oracle = brute_force_f1(preds, labels, classes)
        for c in classes:
            if oracle[c] is None:
                assert res.f1[c] is None
            else:
                assert abs(res.f1[c] - oracle[c]) <= 1e-9
            assert res.support[c] == labels.count(c)
        defined = [res.f1[c] for c in classes if res.f1[c] is not None]
        assert res.macro == sum(defined) / len(defined)
        pc = per_country_f1(preds, labels, countries, classes, min_support=5)
        for cc, v in pc.items():
            idx = [i for i, x in enumerate(countries) if x == cc]
            sub = brute_force_f1([preds[i] for i in idx], [labels[i] for i in idx], classes)
            for c in classes:
                assert (v.result.f1[c] is None) == (sub[c] is None)
                if sub[c] is not None:
                    assert abs(v.result.f1[c] - sub[c]) <= 1e-9
            assert v.support == len(idx) and v.low_support == (len(idx) < 5)


def test_perfect_predictions():
    labels = ["maize", "wheat", "wheat", "barley"]
    res = f1_scores(labels, labels, CROPTYPE_CLASSES)
    assert all(res.f1[c] == 1.0 for c in ("maize", "wheat", "barley"))
    assert res.f1["rapeseed"] is None and res.macro == 1.0


def test_binary_hand_example():
    m = {1: "crop", 0: "non_crop"}
    res = f1_scores([m[x] for x in (1, 1, 0, 0)], [m[x] for x in (1, 0, 0, 1)], CROPLAND_CLASSES)
    assert res.f1["crop"] == 0.5
    assert res.overall("cropland_binary") == 0.5


def test_absent_class_excluded_from_macro():
    res = f1_scores(["a", "b", "b"], ["a", "b", "a"], ["a", "b", "z"])
    assert res.f1["z"] is None
    assert res.macro == (res.f1["a"] + res.f1["b"]) / 2
    assert f1_scores(["a", "b", "b"], ["a", "b", "a"], ["a", "b"], exclude_from_macro=["b"]).macro == res.f1["a"]


def test_macro_invariant_to_class_order():
    rnd = random.Random(5)
    for _ in range(100):
        classes, preds, labels, _ = _fuzz_case(rnd)
        shuffled = classes[:]
        rnd.shuffle(shuffled)
        assert f1_scores(preds, labels, shuffled).macro == pytest.approx(f1_scores(preds, labels, classes).macro, abs=1e-12)


def test_order_invariance_of_samples():
    rnd = random.Random(9)
    classes, preds, labels, _ = _fuzz_case(rnd)
    pairs = list(zip(preds, labels))
    rnd.shuffle(pairs)
    a = f1_scores(preds, labels, classes)
    b = f1_scores([p for p, _ in pairs], [y for _, y in pairs], classes)
    assert a.f1 == b.f1


@pytest.mark.parametrize("preds,labels,err", [
    (["a"], ["a", "b"], "length"),
    ([], [], "empty"),
    (["q"], ["a"], "not in class list"),
])
def test_f1_errors(preds, labels, err):
    with pytest.raises(ValueError, match=err):
        f1_scores(preds, labels, ["a", "b"])


def test_per_country_examples():
    preds, labels = ["crop", "non_crop", "crop"], ["crop", "non_crop", "non_crop"]
    single = per_country_f1(preds, labels, ["ES"] * 3, CROPLAND_CLASSES, min_support=1)
    assert single["ES"].result == f1_scores(preds, labels, CROPLAND_CLASSES)

    preds = ["crop", "non_crop", "non_crop", "crop"]
    labels = ["crop", "non_crop", "crop", "non_crop"]
    two = per_country_f1(preds, labels, ["AA", "AA", "BB", "BB"], CROPLAND_CLASSES, min_support=1)
    assert two["AA"].result.f1["crop"] == 1.0 and two["BB"].result.f1["crop"] == 0.0

    flagged = per_country_f1(["crop"], ["crop"], ["NG"], CROPLAND_CLASSES, min_support=10)
    assert flagged["NG"].low_support


def test_model_result_supports_sum_to_val():
    preds = ["maize", "wheat", "maize", "barley", "wheat"]
    labels = ["maize", "wheat", "wheat", "barley", "maize"]
    mr = model_result("croptype_multiclass", CROPTYPE_CLASSES, preds, labels, ["ES", "ES", "LV", "LV", "LV"],
                      min_support=3, train_support={"maize": 10})
    assert sum(v["support"] for v in mr.per_class.values()) == 5
    assert mr.per_class["maize"]["train_support"] == 10 and mr.per_class["wheat"]["train_support"] == 0
    assert mr.per_country["ES"]["low_support"] and not mr.per_country["LV"]["low_support"]
    rep = EvaluationReport("croptype_multiclass", {"random": SplitResult({"n_val": 5}, {"m": mr})})
    rep.validate()
    rep.splits["random"].descriptor["n_val"] = 6
    with pytest.raises(ValueError, match="n_val"):
        rep.validate()


def test_validate_rejects_out_of_range():
    rep = EvaluationReport("cropland_binary", {"random": SplitResult({}, {"m": ModelResult(1.2)})})
    with pytest.raises(ValueError, match="outside"):
        rep.validate()


# --- rendering -----------------------------------------------------------------------


def test_published_cropland_row():
    md = render_markdown(fixtures.cropland_overall())
    assert "| Finetuned Presto | 0.861 | 0.829 | 0.886 |" in md


@pytest.mark.parametrize("value,base,expected", [
    (0.809, 0.728, "+0.081"),
    (0.705, 0.810, "-0.105"),
    (0.5, 0.5, "+0.000"),
    (0.1234, 0.1231, "+0.000"),
])
def test_format_delta(value, base, expected):
    assert format_delta(value, base) == expected


def test_per_class_table_deltas():
    md = render_markdown(fixtures.croptype_per_class())
    assert "0.809 (+0.081)" in md
    assert "maize (63.2K/4.3K)" in md
    assert "Values in parentheses: change relative to Unprocessed CatBoost." in md


def test_per_country_published_deltas():
    md = render_markdown(fixtures.croptype_per_country())
    for cell in ("0.605 (+0.086)", "0.384 (+0.156)", "AT (33.8K)", "MA (200)"):
        assert cell in md


@pytest.mark.parametrize("name", sorted(fixtures.PUBLISHED))
@pytest.mark.parametrize("fmt,ext", [("markdown", "md"), ("json", "json"), ("csv", "csv")])
def test_golden_files(name, fmt, ext):
    rendered = render_report(fixtures.PUBLISHED[name](), fmt)
    assert rendered.encode("utf-8") == (GOLDEN / f"{name}.{ext}").read_bytes()


def test_rendering_is_deterministic():
    for build in fixtures.PUBLISHED.values():
        assert render_markdown(build()) == render_markdown(build())


@pytest.mark.parametrize("name", sorted(fixtures.PUBLISHED))
def test_json_round_trip(name):
    rep = fixtures.PUBLISHED[name]()
    text = render_json(rep)
    back = EvaluationReport.from_dict(json.loads(text))
    assert render_json(back) == text
    assert render_markdown(back) == render_markdown(rep)
    md = render_markdown(back)
    for s in back.splits.values():
        for res in s.models.values():
            if res.overall is not None:
                assert f"{res.overall:.3f}" in md


def test_unknown_schema_and_format():
    with pytest.raises(ValueError):
        EvaluationReport.from_dict({"schema": "other/9", "task": "x", "splits": {}})
    with pytest.raises(ValueError):
        render_report(fixtures.cropland_overall(), "html")


def test_csv_long_format():
    lines = render_csv(fixtures.cropland_per_country()).splitlines()
    assert lines[0] == "split,model,scope,key,f1,support"
    assert "geographic,Finetuned Presto,country,AR,0.910," in lines


def test_low_support_marker():
    mr = ModelResult(0.5, per_country={"NG": {"f1": 0.5, "support": 3, "low_support": True}})
    md = render_markdown(EvaluationReport("cropland_binary", {"geographic": SplitResult({}, {"m": mr})}))
    assert "0.500*" in md and "NG (3)" in md


# --- comparison ----------------------------------------------------------------------


def _single(task, split, **scores):
    return EvaluationReport(task, {split: SplitResult({}, {m: ModelResult(v) for m, v in scores.items()})})


def test_compare_single_report():
    r = compare_models(_single("cropland_binary", "random", a=0.7))
    assert r["random"].winner == "a" and r["random"].margin == 0.0 and r["random"].deltas() == {"a": 0.0}


def test_compare_two_reports():
    r = compare_models(_single("cropland_binary", "geographic", rnd=0.810),
                       _single("cropland_binary", "geographic", pre=0.861))["geographic"]
    assert r.winner == "pre"
    assert f"{r.margin:+.3f}" == "+0.051"
    assert r.deltas()["rnd"] == pytest.approx(-0.051, abs=1e-12)


def test_compare_tie_break_by_name():
    r = compare_models(_single("cropland_binary", "random", zeta=0.8, alpha=0.8, mid=0.9))["random"]
    assert [m for m, _ in r.entries] == ["mid", "alpha", "zeta"]


def test_compare_mixed_tasks():
    with pytest.raises(ValueError, match="different tasks"):
        compare_models(_single("cropland_binary", "random", a=0.5), _single("croptype_multiclass", "random", a=0.5))


def test_compare_published_table():
    ranks = compare_models(fixtures.cropland_overall())
    assert ranks["geographic"].winner == "Finetuned Presto"
    assert ranks["random"].entries[0][1] == 0.861
    text = render_rankings(ranks)
    assert text.splitlines()[0] == "| Split | Winner | F1 | Margin | Ranking |"
