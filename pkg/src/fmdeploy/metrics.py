"""F1 metrics, evaluation reports and their JSON / markdown / CSV renderings.

A class whose TP + FP + FN is zero (never predicted, never present) has no
defined F1: it is reported as ``None`` and left out of the macro average.
Binary tasks report the positive ("crop") class F1 as their overall score.
"""
from __future__ import annotations

import csv
import io
import json
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

REPORT_SCHEMA = "fmdeploy.report/1"
DEFAULT_MIN_SUPPORT = 50
POSITIVE_CLASS = {"cropland_binary": "crop"}


@dataclass(frozen=True)
class F1Result:
    classes: tuple[str, ...]
    f1: dict  # class -> float | None
    support: dict  # class -> int (label count)
    macro: float | None

    def overall(self, task: str) -> float | None:
        pos = POSITIVE_CLASS.get(task)
        return self.f1[pos] if pos is not None else self.macro


def f1_scores(
    predictions: Sequence[str],
    labels: Sequence[str],
    class_list: Sequence[str],
    exclude_from_macro: Iterable[str] = (),
) -> F1Result:
    """Per-class ``2TP / (2TP + FP + FN)`` with supports, plus the macro mean of the defined ones."""
    if len(predictions) != len(labels):
        raise ValueError(f"length mismatch: {len(predictions)} predictions vs {len(labels)} labels")
    if len(labels) == 0:
        raise ValueError("empty input")
    classes = tuple(class_list)
    pos = {c: i for i, c in enumerate(classes)}
    try:
        p = np.array([pos[x] for x in predictions], dtype=np.int64)
        y = np.array([pos[x] for x in labels], dtype=np.int64)
    except KeyError as e:
        raise ValueError(f"value {e.args[0]!r} not in class list") from None
    k = len(classes)
    cm = np.bincount(y * k + p, minlength=k * k).reshape(k, k)
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    f1, support = {}, {}
    for i, c in enumerate(classes):
        denom = 2 * tp[i] + fp[i] + fn[i]
        f1[c] = None if denom == 0 else float(2 * tp[i] / denom)
        support[c] = int(tp[i] + fn[i])
    skip = set(exclude_from_macro)
    defined = [f1[c] for c in classes if f1[c] is not None and c not in skip]
    macro = float(sum(defined) / len(defined)) if defined else None
    return F1Result(classes, f1, support, macro)


@dataclass(frozen=True)
class CountryF1:
    result: F1Result
    support: int
    low_support: bool


def per_country_f1(
    predictions: Sequence[str],
    labels: Sequence[str],
    countries: Sequence[str],
    class_list: Sequence[str],
    min_support: int = DEFAULT_MIN_SUPPORT,
    exclude_from_macro: Iterable[str] = (),
) -> dict[str, CountryF1]:
    if not len(predictions) == len(labels) == len(countries):
        raise ValueError("predictions, labels and countries must be aligned")
    if len(labels) == 0:
        raise ValueError("empty input")
    groups: dict[str, list[int]] = {}
    for i, c in enumerate(countries):
        groups.setdefault(c, []).append(i)
    out = {}
    for c in sorted(groups):
        idx = groups[c]
        res = f1_scores([predictions[i] for i in idx], [labels[i] for i in idx], class_list, exclude_from_macro)
        out[c] = CountryF1(res, len(idx), len(idx) < min_support)
    return out


# --- reports -------------------------------------------------------------------------


@dataclass
class ModelResult:
    overall: float | None
    per_class: dict = field(default_factory=dict)  # class -> {"f1": float|None, "support": int, "train_support"?: int}
    per_country: dict = field(default_factory=dict)  # country -> {"f1": float|None, "support": int, "low_support": bool}

    def to_dict(self) -> dict:
        return {"overall": self.overall, "per_class": self.per_class, "per_country": self.per_country}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelResult":
        return cls(d["overall"], dict(d.get("per_class", {})), dict(d.get("per_country", {})))


@dataclass
class SplitResult:
    descriptor: dict  # strategy, holdout, n_train, n_val, split_id
    models: dict = field(default_factory=dict)  # model name -> ModelResult

    def to_dict(self) -> dict:
        return {"descriptor": self.descriptor, "models": {k: v.to_dict() for k, v in self.models.items()}}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SplitResult":
        return cls(dict(d["descriptor"]), {k: ModelResult.from_dict(v) for k, v in d["models"].items()})


@dataclass
class EvaluationReport:
    task: str
    splits: dict = field(default_factory=dict)  # split name -> SplitResult
    baseline: str | None = None  # model the deltas are relative to
    metadata: dict = field(default_factory=dict)
    title: str = ""

    def model_names(self) -> list[str]:
        names: list[str] = []
        for s in self.splits.values():
            names += [m for m in s.models if m not in names]
        return names

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "task": self.task,
            "title": self.title,
            "baseline": self.baseline,
            "metadata": self.metadata,
            "splits": {k: v.to_dict() for k, v in self.splits.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvaluationReport":
        if d.get("schema") != REPORT_SCHEMA:
            raise ValueError(f"unsupported report schema {d.get('schema')!r}")
        return cls(
            d["task"],
            {k: SplitResult.from_dict(v) for k, v in d["splits"].items()},
            d.get("baseline"),
            dict(d.get("metadata", {})),
            d.get("title", ""),
        )

    def validate(self) -> None:
        for sname, s in self.splits.items():
            for mname, m in s.models.items():
                vals = [m.overall] + [v["f1"] for v in m.per_class.values()] + [v["f1"] for v in m.per_country.values()]
                for v in vals:
                    if v is not None and not 0.0 <= v <= 1.0:
                        raise ValueError(f"{sname}/{mname}: F1 {v} outside [0, 1]")
                n_val = s.descriptor.get("n_val")
                if m.per_class and n_val is not None and sum(v["support"] for v in m.per_class.values()) != n_val:
                    raise ValueError(f"{sname}/{mname}: per-class supports do not sum to n_val={n_val}")


def model_result(
    task: str,
    class_list: Sequence[str],
    predictions: Sequence[str],
    labels: Sequence[str],
    countries: Sequence[str],
    min_support: int = DEFAULT_MIN_SUPPORT,
    exclude_from_macro: Iterable[str] = (),
    train_support: Mapping[str, int] | None = None,
) -> ModelResult:
    """Overall, per-class and per-country F1 of one model on one validation side."""
    exclude = tuple(exclude_from_macro)
    res = f1_scores(predictions, labels, class_list, exclude)
    per_class = {}
    for c in res.classes:
        row = {"f1": res.f1[c], "support": res.support[c]}
        if train_support is not None:
            row["train_support"] = int(train_support.get(c, 0))
        per_class[c] = row
    per_country = {
        cc: {"f1": v.result.overall(task), "support": v.support, "low_support": v.low_support}
        for cc, v in per_country_f1(predictions, labels, countries, class_list, min_support, exclude).items()
    }
    return ModelResult(res.overall(task), per_class, per_country)


# --- rendering -----------------------------------------------------------------------


def _fmt(v: float | None) -> str:
    return "n/a" if v is None else f"{v:.3f}"


def format_delta(value: float | None, base: float | None) -> str:
    if value is None or base is None:
        return ""
    d = round(round(value, 3) - round(base, 3), 3)
    return f"{d:+.3f}".replace("-0.000", "+0.000")


def _cell(value: float | None, base: float | None, show_delta: bool) -> str:
    s = _fmt(value)
    if show_delta and value is not None and base is not None:
        s += f" ({format_delta(value, base)})"
    return s


def _count(n: int | None) -> str:
    if n is None:
        return "?"
    return f"{n / 1000:.1f}K" if n >= 1000 else str(n)


def _table(header: list[str], rows: list[list[str]]) -> list[str]:
    out = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    out += ["| " + " | ".join(r) + " |" for r in rows]
    return out


def render_markdown(report: EvaluationReport) -> str:
    """Models as rows, splits (or countries) as columns; classes as rows in per-class tables."""
    lines = [f"# {report.title or report.task}", ""]
    models = report.model_names()
    base = report.baseline
    split_names = list(report.splits)
    metric = "Crop F1" if report.task in POSITIVE_CLASS else "Macro F1"

    has_overall = any(r.overall is not None for s in report.splits.values() for r in s.models.values())
    header = ["Model"] + [s.capitalize() for s in split_names]
    rows = []
    for m in models if has_overall else ():
        row = [m]
        for s in split_names:
            res = report.splits[s].models.get(m)
            b = report.splits[s].models.get(base) if base else None
            row.append(_cell(res.overall if res else None, b.overall if b else None, bool(base) and m != base) if res else "")
        rows.append(row)
    if rows:
        lines += [f"## Overall {metric}", ""] + _table(header, rows) + [""]

    for s in split_names:
        sr = report.splits[s]
        countries: list[str] = []
        for res in sr.models.values():
            countries += [c for c in res.per_country if c not in countries]
        if countries:
            lines += [f"## Per-country {metric} ({s} split)", ""]
            header = ["Model"]
            for c in countries:
                n = next((r.per_country[c].get("support") for r in sr.models.values() if c in r.per_country), None)
                header.append(c if n is None else f"{c} ({_count(n)})")
            rows = []
            for m in models:
                res = sr.models.get(m)
                if res is None:
                    continue
                b = sr.models.get(base) if base else None
                row = [m]
                for c in countries:
                    v = res.per_country.get(c)
                    bv = b.per_country.get(c) if b else None
                    cell = _cell(v["f1"] if v else None, bv["f1"] if bv else None, bool(base) and m != base)
                    if v and v.get("low_support"):
                        cell += "*"
                    row.append(cell if v else "")
                rows.append(row)
            lines += _table(header, rows)
            if any(r.per_country.get(c, {}).get("low_support") for r in sr.models.values() for c in countries):
                lines.append("")
                lines.append("\\* fewer validation samples than the minimum support")
            lines.append("")

        classes: list[str] = []
        for res in sr.models.values():
            classes += [c for c in res.per_class if c not in classes]
        if classes:
            lines += [f"## Per-class F1 ({s} split)", ""]
            present = [m for m in models if m in sr.models]
            rows = []
            for c in classes:
                ref = next(r.per_class[c] for r in sr.models.values() if c in r.per_class)
                if "train_support" in ref:
                    label = f"{c} ({_count(ref.get('train_support'))}/{_count(ref.get('support'))})"
                else:
                    label = f"{c} ({_count(ref.get('support'))})"
                row = [label]
                for m in present:
                    v = sr.models[m].per_class.get(c)
                    bv = sr.models[base].per_class.get(c) if base and base in sr.models else None
                    row.append(_cell(v["f1"] if v else None, bv["f1"] if bv else None, bool(base) and m != base) if v else "")
                rows.append(row)
            macro_row = [f"{metric}"]
            for m in present:
                b = sr.models.get(base) if base else None
                macro_row.append(_cell(sr.models[m].overall, b.overall if b else None, bool(base) and m != base))
            rows.append(macro_row)
            lines += _table(["Class (train/val)" if "train_support" in ref else "Class (val)"] + present, rows) + [""]

    if base:
        lines += [f"Values in parentheses: change relative to {base}.", ""]
    return "\n".join(lines).rstrip("\n") + "\n"


def render_json(report: EvaluationReport) -> str:
    return json.dumps(report.to_dict(), indent=1) + "\n"  # insertion order carries table layout


def render_report(report: EvaluationReport, format: str = "markdown") -> str:
    if format == "json":
        return render_json(report)
    if format == "markdown":
        return render_markdown(report)
    if format == "csv":
        return render_csv(report)
    raise ValueError(f"unknown report format {format!r}")


def render_csv(report: EvaluationReport) -> str:
    """Long-format rows: split, model, scope (overall/class/country), key, f1, support."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["split", "model", "scope", "key", "f1", "support"])
    for s, sr in report.splits.items():
        for m, res in sr.models.items():
            w.writerow([s, m, "overall", "", _fmt(res.overall), sr.descriptor.get("n_val", "")])
            for c, v in res.per_class.items():
                w.writerow([s, m, "class", c, _fmt(v["f1"]), v["support"]])
            for c, v in res.per_country.items():
                w.writerow([s, m, "country", c, _fmt(v["f1"]), v["support"]])
    return buf.getvalue()


# --- model comparison ----------------------------------------------------------------


@dataclass(frozen=True)
class Ranking:
    split: str
    entries: tuple[tuple[str, float | None], ...]  # best first
    margin: float  # winner minus runner-up (0 for a single model)

    @property
    def winner(self) -> str:
        return self.entries[0][0]

    def deltas(self) -> dict[str, float]:
        """Each model's overall F1 minus the winner's."""
        top = self.entries[0][1] or 0.0
        return {m: round((v or 0.0) - top, 12) for m, v in self.entries}


def compare_models(*reports: EvaluationReport) -> dict[str, Ranking]:
    """Rank models per split by overall F1 (descending), ties broken by model name."""
    if not reports:
        raise ValueError("no reports to compare")
    tasks = {r.task for r in reports}
    if len(tasks) > 1:
        raise ValueError(f"cannot compare reports of different tasks: {sorted(tasks)}")
    merged: dict[str, dict[str, float | None]] = OrderedDict()
    for r in reports:
        for s, sr in r.splits.items():
            for m, res in sr.models.items():
                merged.setdefault(s, {})[m] = res.overall
    out = {}
    for s, models in merged.items():
        entries = sorted(models.items(), key=lambda kv: (-(kv[1] if kv[1] is not None else -1.0), kv[0]))
        margin = 0.0
        if len(entries) > 1 and entries[0][1] is not None and entries[1][1] is not None:
            margin = round(entries[0][1] - entries[1][1], 12)
        out[s] = Ranking(s, tuple(entries), margin)
    return out


def render_rankings(rankings: Mapping[str, Ranking]) -> str:
    rows = [[s, r.winner, _fmt(r.entries[0][1]), f"{r.margin:+.3f}", " > ".join(m for m, _ in r.entries)] for s, r in rankings.items()]
    return "\n".join(_table(["Split", "Winner", "F1", "Margin", "Ranking"], rows)) + "\n"
