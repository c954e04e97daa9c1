"""Train/validation splits (random, geographic, temporal), label-efficiency schedules, leakage audit."""
from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

from fmdeploy.data import TASK_CLASSES, UNKNOWN, Dataset

CROPLAND_HOLDOUT = ("ES", "NG", "LV", "TZ", "ET", "AR")
CROPTYPE_HOLDOUT = ("ES", "LV", "AT", "BR", "TZ", "ET", "MG", "MZ", "MA", "ID")
GEOGRAPHIC_PRESETS = {"cropland_binary": CROPLAND_HOLDOUT, "croptype_multiclass": CROPTYPE_HOLDOUT}
TEMPORAL_HOLDOUT = (2021,)
STRATEGIES = ("random", "geographic", "temporal")


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSplit:
    strategy: str
    seed: int
    holdout: dict
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise SplitError(f"unknown split strategy {self.strategy!r}")
        object.__setattr__(self, "train_ids", tuple(self.train_ids))
        object.__setattr__(self, "val_ids", tuple(self.val_ids))
        if not self.train_ids or not self.val_ids:
            raise SplitError(f"{self.strategy} split leaves an empty side "
                             f"(train={len(self.train_ids)}, val={len(self.val_ids)})")
        if set(self.train_ids) & set(self.val_ids):
            raise SplitError("train and val overlap")

    @property
    def split_id(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "seed": self.seed,
            "holdout": self.holdout,
            "train_ids": list(self.train_ids),
            "val_ids": list(self.val_ids),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSplit":
        return cls(d["strategy"], int(d["seed"]), d["holdout"], tuple(d["train_ids"]), tuple(d["val_ids"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetSplit":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _hash_order(ids: Iterable[str], seed: int) -> list[str]:
    """Seeded ordering that depends only on the ids themselves, not their positions."""
    return sorted(ids, key=lambda s: (hashlib.sha256(f"{seed}:{s}".encode()).digest(), s))


def round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def _frac(x: float) -> Fraction:
    return Fraction(str(x)) if isinstance(x, float) else Fraction(x)


def random_split(dataset: Dataset, ratio: float = 0.8, seed: int = 0) -> DatasetSplit:
    """``round_half_up(ratio * N)`` samples go to train, chosen by a seeded hash of their ids."""
    if not 0 < ratio < 1:
        raise SplitError("ratio must be in (0, 1)")
    n = len(dataset)
    n_train = round_half_up(_frac(ratio) * n)
    if n < 2 or n_train in (0, n):
        raise SplitError(f"dataset of {n} samples is too small for a {ratio} split")
    train = set(_hash_order(dataset.ids, seed)[:n_train])
    return DatasetSplit(
        "random",
        seed,
        {"ratio": ratio},
        tuple(i for i in dataset.ids if i in train),
        tuple(i for i in dataset.ids if i not in train),
    )


def geographic_split(dataset: Dataset, held_out_countries: Iterable[str]) -> DatasetSplit:
    held = sorted(set(held_out_countries))
    if not held:
        raise SplitError("held_out_countries is empty")
    val = tuple(s.sample_id for s in dataset if s.country in held)
    train = tuple(s.sample_id for s in dataset if s.country not in held)
    return DatasetSplit("geographic", 0, {"countries": held}, train, val)


def temporal_split(dataset: Dataset, held_out_years: Iterable[int]) -> DatasetSplit:
    held = sorted({int(y) for y in held_out_years})
    if not held:
        raise SplitError("held_out_years is empty")
    val = tuple(s.sample_id for s in dataset if s.year in held)
    train = tuple(s.sample_id for s in dataset if s.year not in held)
    return DatasetSplit("temporal", 0, {"years": held}, train, val)


# --- label efficiency ----------------------------------------------------------------


@dataclass(frozen=True)
class EfficiencySchedule:
    base_split: DatasetSplit
    target_region: tuple[str, ...]
    fractions: tuple[float, ...]
    step_id_lists: tuple[tuple[str, ...], ...]

    def split_at(self, step: int) -> DatasetSplit:
        """Base split with step ``step``'s regional samples moved from val to train."""
        inject = self.step_id_lists[step]
        moved = set(inject)
        base = self.base_split
        holdout = dict(base.holdout)
        holdout["injected"] = list(inject)
        return DatasetSplit(
            base.strategy,
            base.seed,
            holdout,
            base.train_ids + tuple(inject),
            tuple(i for i in base.val_ids if i not in moved),
        )


def efficiency_schedule(
    dataset: Dataset,
    base_split: DatasetSplit,
    region: Iterable[str],
    fractions: Sequence[float],
    seed: int = 0,
    reserved: Iterable[str] = (),
) -> EfficiencySchedule:
    """Nested injection steps: step i holds the first ``floor(f_i * N)`` of one seeded shuffle.

    The pool is the region's validation samples minus ``reserved`` (ids kept
    aside for evaluating every step); N is the pool size.
    """
    region = tuple(sorted(set(region)))
    held = set(base_split.holdout.get("countries", ()))
    if base_split.strategy != "geographic" or not set(region) <= held:
        raise SplitError(f"region {list(region)} must be among the base split's held-out countries")
    fr = [_frac(f) for f in fractions]
    if any(f < 0 or f > 1 for f in fr) or any(b <= a for a, b in zip(fr, fr[1:])):
        raise SplitError("fractions must be strictly increasing within [0, 1]")
    val = set(base_split.val_ids) - set(reserved)
    pool = [s.sample_id for s in dataset if s.country in region and s.sample_id in val]
    if not pool:
        raise SplitError(f"region {list(region)} has no samples")
    order = _hash_order(pool, seed)
    steps = tuple(tuple(order[: math.floor(f * len(order))]) for f in fr)
    if steps[-1] and set(steps[-1]) == set(base_split.val_ids):
        raise SplitError("the last step would leave the validation side empty; reserve evaluation ids")
    return EfficiencySchedule(base_split, region, tuple(float(f) for f in fractions), steps)


# --- audit ---------------------------------------------------------------------------


@dataclass
class AuditReport:
    strategy: str
    disjoint: bool
    unknown_ids: list[str]
    missing_ids: list[str]
    purity: str  # "pass" | "fail" | "n/a"
    leaked_ids: list[str]
    class_coverage: dict = field(default_factory=dict)  # task -> side -> {class: count}
    warnings: list[str] = field(default_factory=list)
    counts_by_country: dict = field(default_factory=dict)  # side -> {country: n}
    counts_by_year: dict = field(default_factory=dict)

    @property
    def leakage_count(self) -> int:
        return len(self.leaked_ids)

    @property
    def ok(self) -> bool:
        return self.disjoint and not self.unknown_ids and self.purity != "fail"

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "ok": self.ok,
            "disjoint": self.disjoint,
            "unknown_ids": self.unknown_ids,
            "missing_ids": self.missing_ids,
            "purity": self.purity,
            "leakage_count": self.leakage_count,
            "leaked_ids": self.leaked_ids,
            "class_coverage": self.class_coverage,
            "warnings": self.warnings,
            "counts_by_country": self.counts_by_country,
            "counts_by_year": self.counts_by_year,
        }

    def to_text(self) -> str:
        lines = [
            f"split strategy: {self.strategy}",
            f"disjoint: {'yes' if self.disjoint else 'NO'}",
            f"ids unknown to dataset: {len(self.unknown_ids)}",
            f"dataset ids in neither side: {len(self.missing_ids)}",
            f"holdout purity: {self.purity} (leaked train samples: {self.leakage_count})",
        ]
        lines += [f"  leaked: {i}" for i in self.leaked_ids[:20]]
        for side in ("train", "val"):
            c = self.counts_by_country.get(side, {})
            lines.append(f"{side}: {sum(c.values())} samples, countries " + ", ".join(f"{k}={v}" for k, v in c.items()))
            y = self.counts_by_year.get(side, {})
            lines.append(f"{side} years: " + ", ".join(f"{k}={v}" for k, v in y.items()))
        lines += [f"warning: {w}" for w in self.warnings]
        return "\n".join(lines) + "\n"


def audit_split(dataset: Dataset, split: DatasetSplit) -> AuditReport:
    """Check disjointness, holdout purity and class coverage. Never raises on violations."""
    index = dataset.index
    train, val = set(split.train_ids), set(split.val_ids)
    unknown = sorted((train | val) - set(index))
    missing = [i for i in dataset.ids if i not in train and i not in val]
    injected = set(split.holdout.get("injected", ()))
    known_train = [dataset.samples[index[i]] for i in split.train_ids if i in index]
    known_val = [dataset.samples[index[i]] for i in split.val_ids if i in index]

    leaked: list[str] = []
    purity = "n/a"
    if split.strategy == "geographic":
        held = set(split.holdout.get("countries", ()))
        leaked = [s.sample_id for s in known_train if s.country in held and s.sample_id not in injected]
        purity = "fail" if leaked else "pass"
    elif split.strategy == "temporal":
        held = {int(y) for y in split.holdout.get("years", ())}
        leaked = [s.sample_id for s in known_train if s.year in held and s.sample_id not in injected]
        purity = "fail" if leaked else "pass"

    coverage, warns = {}, []
    for task, classes in TASK_CLASSES.items():
        per_side = {}
        for side, samples in (("train", known_train), ("val", known_val)):
            c = Counter(s.label(task) for s in samples if s.label(task) != UNKNOWN)
            per_side[side] = {k: c.get(k, 0) for k in classes}
        if sum(per_side["train"].values()) == 0:
            continue
        coverage[task] = per_side
        absent = [k for k, v in per_side["train"].items() if v == 0]
        if absent:
            warns.append(f"{task}: classes absent from train: {', '.join(absent)}")
    if unknown:
        warns.append(f"{len(unknown)} split ids are not in the dataset")

    def _counts(samples, key):
        return dict(sorted(Counter(key(s) for s in samples).items()))

    return AuditReport(
        strategy=split.strategy,
        disjoint=not (train & val),
        unknown_ids=unknown,
        missing_ids=missing,
        purity=purity,
        leaked_ids=leaked,
        class_coverage=coverage,
        warnings=warns,
        counts_by_country={"train": _counts(known_train, lambda s: s.country), "val": _counts(known_val, lambda s: s.country)},
        counts_by_year={"train": _counts(known_train, lambda s: str(s.year)), "val": _counts(known_val, lambda s: str(s.year))},
    )
