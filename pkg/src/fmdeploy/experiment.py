"""Experiment configs (TOML) and the end-to-end pipeline behind ``fmdeploy run``.

A run directory holds everything one invocation produced::

    config.json              canonical copy of the validated config
    encoder.npz              pretrained encoder (when pretraining ran)
    splits/<task>-<split>.json, audits/<task>-<split>.json
    models/<task>/<split>/<variant>.npz (+ .log.jsonl)
    report-<task>.{json,md,csv}
    label_efficiency-<task>.json
    figures/*.png, maps/*.png + *.json
    manifest.json            file hashes, dataset fingerprints, stage timings

Only ``manifest.json`` carries wall-clock data, so the reports and artifacts of
two runs with the same config are byte-identical.
"""
from __future__ import annotations

import datetime as dt
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from fmdeploy import adapt, mapping, metrics, plotting, splits
from fmdeploy.data import DEFAULT_SCHEMA, TASK_CLASSES, UNKNOWN, Dataset, load_dataset
from fmdeploy.encoder import EncoderConfig, build_encoder, load_encoder, save_encoder
from fmdeploy.synth import RasterPatch, default_benchmark

log = logging.getLogger(__name__)

ENV_OUT = "FMDEPLOY_OUT"
ENV_THREADS = "FMDEPLOY_THREADS"
VARIANT_LABELS = {
    "boosted_raw": "Unprocessed boosted trees",
    "random_init_finetune": "Random-init finetuned encoder",
    "frozen_head": "Frozen encoder + linear head",
    "finetune": "Finetuned encoder",
    "ssl_then_finetune": "SSL + finetuned encoder",
}
TASK_TITLES = {"cropland_binary": "Cropland (binary)", "croptype_multiclass": "Crop type (multiclass)"}
TASK_DATA = {"cropland_binary": "cropland", "croptype_multiclass": "croptype"}


class ConfigError(ValueError):
    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException, run_dir: Path | None = None):
        self.stage, self.cause, self.run_dir = stage, cause, run_dir
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")


# --- config --------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    strategy: str
    ratio: float = 0.8
    countries: tuple[str, ...] | None = None  # None -> task preset
    years: tuple[int, ...] = splits.TEMPORAL_HOLDOUT

    @property
    def name(self) -> str:
        return self.strategy


@dataclass(frozen=True)
class LabelEfficiencySpec:
    task: str = "cropland_binary"
    region: tuple[str, ...] = ("NG",)
    fractions: tuple[float, ...] = (0.0, 0.25, 0.5, 1.0)
    eval_fraction: float = 0.5
    variant: str = "finetune"


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    tasks: tuple[str, ...] = ("cropland_binary", "croptype_multiclass")
    output_dir: str = "runs"
    # data: synthetic default benchmark, or dataset paths
    synthetic: bool = True
    scale: float = 1.0
    pretrain_data: str | None = None
    labeled_data: Mapping[str, str] = field(default_factory=dict)  # task -> path
    patches: tuple[str, ...] = ()
    splits: tuple[SplitSpec, ...] = (SplitSpec("random"), SplitSpec("geographic"), SplitSpec("temporal"))
    variants: tuple[str, ...] = ("boosted_raw", "random_init_finetune", "finetune")
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    encoder_path: str | None = None  # use this pretrained encoder instead of pretraining
    pretrain_epochs: int = 2
    pretrain_lr: float = 1e-3
    train: Mapping[str, Any] = field(default_factory=lambda: {"learning_rate": 2e-3})
    task_train: Mapping[str, Mapping[str, Any]] = field(
        default_factory=lambda: {"cropland_binary": {"epochs": 5}, "croptype_multiclass": {"epochs": 20}}
    )
    min_support: int = metrics.DEFAULT_MIN_SUPPORT
    exclude_from_macro: tuple[str, ...] = ()
    baseline: str | None = None
    maps: bool = True
    tile_size: int = 8
    label_efficiency: LabelEfficiencySpec | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        return json.loads(json.dumps(d))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]

    def train_config(self, task: str, mode: str = "finetune") -> adapt.TrainConfig:
        kw = {**self.train, **self.task_train.get(task, {})}
        return adapt.TrainConfig(task=task, mode=mode, seed=self.seed, **kw)


_TRAIN_KEYS = {f for f in adapt.TrainConfig.__dataclass_fields__} - {"task", "mode", "seed"}
_ENCODER_KEYS = {f for f in EncoderConfig.__dataclass_fields__} - {"schema"}


def _check_keys(section: Mapping, allowed: set, where: str, errors: list[str]) -> None:
    for k in section:
        if k not in allowed:
            errors.append(f"{where}: unknown key {k!r}")


def config_from_dict(raw: Mapping, base_dir: str | Path = ".") -> ExperimentConfig:
    """Validate a parsed TOML document; every problem found is reported in one ConfigError."""
    errors: list[str] = []
    base = Path(base_dir)
    top = {"name", "seed", "tasks", "task", "output_dir", "data", "splits", "variants", "encoder",
           "pretrain", "train", "eval", "maps", "label_efficiency"}
    _check_keys(raw, top, "config", errors)
    kw: dict[str, Any] = {}
    for k in ("name", "output_dir"):
        if k in raw:
            kw[k] = str(raw[k])
    if "seed" in raw:
        if isinstance(raw["seed"], bool) or not isinstance(raw["seed"], int) or raw["seed"] < 0:
            errors.append("seed: must be a non-negative integer")
        else:
            kw["seed"] = raw["seed"]
    tasks = raw.get("tasks", [raw["task"]] if "task" in raw else None)
    if tasks is not None:
        tasks = [tasks] if isinstance(tasks, str) else list(tasks)
        bad = [t for t in tasks if t not in TASK_CLASSES]
        if bad or not tasks:
            errors.append(f"tasks: unknown or empty {bad or tasks}; choose from {sorted(TASK_CLASSES)}")
        kw["tasks"] = tuple(tasks)

    data = raw.get("data", {})
    _check_keys(data, {"synthetic", "scale", "pretrain", "labeled", "patches"}, "data", errors)
    synthetic = bool(data.get("synthetic", "labeled" not in data))
    kw["synthetic"] = synthetic
    if "scale" in data:
        if not isinstance(data["scale"], (int, float)) or not 0 < data["scale"] <= 1:
            errors.append("data.scale: must be in (0, 1]")
        else:
            kw["scale"] = float(data["scale"])

    def _path(p: str, where: str) -> str:
        full = (base / p) if not Path(p).is_absolute() else Path(p)
        if not full.exists():
            errors.append(f"{where}: file not found: {full}")
        return str(full)

    if not synthetic:
        labeled = data.get("labeled", {})
        if not isinstance(labeled, Mapping) or not labeled:
            errors.append("data.labeled: table of task -> dataset path required when synthetic = false")
        else:
            kw["labeled_data"] = {t: _path(p, f"data.labeled.{t}") for t, p in labeled.items()}
        if "pretrain" in data:
            kw["pretrain_data"] = _path(data["pretrain"], "data.pretrain")
        kw["patches"] = tuple(_path(p, "data.patches") for p in data.get("patches", []))
        for t in kw.get("tasks", ExperimentConfig.tasks):
            if t not in kw.get("labeled_data", {t: None}):
                errors.append(f"data.labeled: no dataset for task {t!r}")

    if "splits" in raw:
        specs = []
        for i, s in enumerate(raw["splits"]):
            where = f"splits[{i}]"
            _check_keys(s, {"strategy", "ratio", "countries", "years"}, where, errors)
            if s.get("strategy") not in splits.STRATEGIES:
                errors.append(f"{where}.strategy: must be one of {list(splits.STRATEGIES)}")
                continue
            specs.append(SplitSpec(
                s["strategy"],
                float(s.get("ratio", 0.8)),
                tuple(s["countries"]) if "countries" in s else None,
                tuple(int(y) for y in s.get("years", splits.TEMPORAL_HOLDOUT)),
            ))
        names = [s.name for s in specs]
        if len(set(names)) != len(names):
            errors.append("splits: each strategy may appear once")
        if not specs:
            errors.append("splits: at least one split required")
        kw["splits"] = tuple(specs)

    if "variants" in raw:
        v = list(raw["variants"])
        bad = [x for x in v if x not in adapt.MODES]
        if not v or bad:
            errors.append(f"variants: nonempty subset of {list(adapt.MODES)} required (bad: {bad})")
        kw["variants"] = tuple(v)

    enc = raw.get("encoder", {})
    _check_keys(enc, _ENCODER_KEYS | {"path"}, "encoder", errors)
    try:
        ecfg = EncoderConfig(**{k: v for k, v in enc.items() if k in _ENCODER_KEYS})
        ecfg.validate()
        kw["encoder"] = ecfg
    except (TypeError, ValueError) as e:
        errors.append(f"encoder: {e}")
    if "path" in enc:
        kw["encoder_path"] = _path(enc["path"], "encoder.path")

    pre = raw.get("pretrain", {})
    _check_keys(pre, {"epochs", "learning_rate"}, "pretrain", errors)
    if "epochs" in pre:
        kw["pretrain_epochs"] = int(pre["epochs"])
        if pre["epochs"] < 0:
            errors.append("pretrain.epochs: must be >= 0")
    if "learning_rate" in pre:
        kw["pretrain_lr"] = float(pre["learning_rate"])

    train = dict(raw.get("train", {}))
    task_train = {t: dict(train.pop(t)) for t in list(train) if t in TASK_CLASSES}
    _check_keys(train, _TRAIN_KEYS, "train", errors)
    for t, sec in task_train.items():
        _check_keys(sec, _TRAIN_KEYS, f"train.{t}", errors)
    if "train" in raw:
        kw["train"] = train
        kw["task_train"] = task_train

    ev = raw.get("eval", {})
    _check_keys(ev, {"min_support", "exclude_from_macro", "baseline"}, "eval", errors)
    if "min_support" in ev:
        kw["min_support"] = int(ev["min_support"])
    if "exclude_from_macro" in ev:
        kw["exclude_from_macro"] = tuple(ev["exclude_from_macro"])
    if "baseline" in ev:
        kw["baseline"] = ev["baseline"]
        if ev["baseline"] not in kw.get("variants", ExperimentConfig.variants):
            errors.append(f"eval.baseline: {ev['baseline']!r} is not among the variants")

    mp = raw.get("maps", {})
    _check_keys(mp, {"enabled", "tile_size"}, "maps", errors)
    kw["maps"] = bool(mp.get("enabled", True))
    if "tile_size" in mp:
        kw["tile_size"] = int(mp["tile_size"])
        if kw["tile_size"] < 1:
            errors.append("maps.tile_size: must be >= 1")

    if "label_efficiency" in raw:
        le = raw["label_efficiency"]
        _check_keys(le, set(LabelEfficiencySpec.__dataclass_fields__), "label_efficiency", errors)
        spec = LabelEfficiencySpec(
            task=le.get("task", "cropland_binary"),
            region=tuple(le.get("region", ("NG",))),
            fractions=tuple(float(f) for f in le.get("fractions", (0.0, 0.25, 0.5, 1.0))),
            eval_fraction=float(le.get("eval_fraction", 0.5)),
            variant=le.get("variant", "finetune"),
        )
        if spec.task not in kw.get("tasks", ExperimentConfig.tasks):
            errors.append(f"label_efficiency.task: {spec.task!r} is not among the tasks")
        if spec.variant not in adapt.MODES:
            errors.append(f"label_efficiency.variant: unknown mode {spec.variant!r}")
        if not 0 < spec.eval_fraction < 1:
            errors.append("label_efficiency.eval_fraction: must be in (0, 1)")
        fr = spec.fractions
        if not fr or any(f < 0 or f > 1 for f in fr) or any(b <= a for a, b in zip(fr, fr[1:])):
            errors.append("label_efficiency.fractions: strictly increasing values in [0, 1] required")
        kw["label_efficiency"] = spec

    if errors:
        raise ConfigError(errors)
    cfg = ExperimentConfig(**kw)
    for t in cfg.tasks:
        for mode in cfg.variants:
            try:
                cfg.train_config(t, mode).validate()
            except (TypeError, ValueError) as e:
                errors.append(f"train ({t}): {e}")
    if errors:
        raise ConfigError(errors)
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"config file not found: {path}"])
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as e:
        raise ConfigError([f"{path}: invalid TOML: {e}"]) from None
    return config_from_dict(raw, path.parent)


# --- helpers -------------------------------------------------------------------------


def apply_thread_env() -> None:
    n = os.environ.get(ENV_THREADS)
    if n:
        import torch

        torch.set_num_threads(int(n))


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def make_split(dataset: Dataset, spec: SplitSpec, task: str, seed: int) -> splits.DatasetSplit:
    if spec.strategy == "random":
        return splits.random_split(dataset, spec.ratio, seed)
    if spec.strategy == "geographic":
        return splits.geographic_split(dataset, spec.countries or splits.GEOGRAPHIC_PRESETS[task])
    return splits.temporal_split(dataset, spec.years)


@dataclass
class LoadedData:
    pretrain: Dataset | None
    labeled: dict  # task -> Dataset
    patches: dict  # task -> RasterPatch


def load_data(cfg: ExperimentConfig) -> LoadedData:
    if cfg.synthetic:
        pre, cropland, croptype, patches = default_benchmark(cfg.seed, cfg.scale)
        by_name = {"cropland": cropland, "croptype": croptype}
        return LoadedData(pre, {t: by_name[TASK_DATA[t]] for t in cfg.tasks}, {TASK_DATA_INV[k]: p for k, p in patches.items()})
    labeled = {t: load_dataset(cfg.labeled_data[t]) for t in cfg.tasks}
    pre = load_dataset(cfg.pretrain_data) if cfg.pretrain_data else None
    patches = {}
    for p in cfg.patches:
        patch, _ = mapping.read_patch(p)
        for t in cfg.tasks:
            patches.setdefault(t, patch)
    return LoadedData(pre, labeled, patches)


TASK_DATA_INV = {v: k for k, v in TASK_DATA.items()}


def pretrain_encoder(cfg: ExperimentConfig, unlabeled: Dataset | None) -> tuple[Any, list[dict]]:
    """Built (seeded) encoder, SSL-pretrained on ``unlabeled`` unless a pretrained path is configured."""
    if cfg.encoder_path:
        return load_encoder(cfg.encoder_path), []
    enc = build_encoder(cfg.encoder, seed=cfg.seed)
    if unlabeled is None or cfg.pretrain_epochs == 0:
        return enc, []
    tc = adapt.TrainConfig(seed=cfg.seed, learning_rate=cfg.pretrain_lr)
    return adapt.ssl_pretrain(enc, unlabeled, tc, epochs=cfg.pretrain_epochs)


def evaluate_classifier(
    clf: adapt.TrainedClassifier, dataset: Dataset, split: splits.DatasetSplit, task: str,
    min_support: int = metrics.DEFAULT_MIN_SUPPORT, exclude_from_macro: Sequence[str] = (),
) -> metrics.ModelResult:
    val = dataset.subset(split.val_ids).filter(lambda s: s.label(task) != UNKNOWN)
    if len(val) == 0:
        raise ValueError(f"{split.strategy} split has no labelled validation samples for {task}")
    train_labels = [s.label(task) for s in dataset.subset(split.train_ids) if s.label(task) != UNKNOWN]
    train_support = {c: train_labels.count(c) for c in TASK_CLASSES[task]}
    pred = adapt.predict(clf, val)
    return metrics.model_result(
        task, TASK_CLASSES[task], pred.labels, val.labels(task), [s.country for s in val],
        min_support, exclude_from_macro, train_support,
    )


def split_descriptor(dataset: Dataset, split: splits.DatasetSplit, task: str) -> dict:
    n_val = sum(1 for s in dataset.subset(split.val_ids) if s.label(task) != UNKNOWN)
    n_train = sum(1 for s in dataset.subset(split.train_ids) if s.label(task) != UNKNOWN)
    return {"strategy": split.strategy, "holdout": split.holdout, "n_train": n_train, "n_val": n_val, "split_id": split.split_id}


def run_label_efficiency(
    spec: LabelEfficiencySpec, cfg: ExperimentConfig, dataset: Dataset, encoder, ssl_data: Dataset | None = None,
) -> dict:
    """Regional F1 on a fixed reserved subset as growing nested shares of the region join training."""
    task = spec.task
    base = splits.geographic_split(dataset, splits.GEOGRAPHIC_PRESETS[task])
    held = set(base.holdout["countries"])
    if not set(spec.region) <= held:
        raise splits.SplitError(f"region {list(spec.region)} is not held out in the {task} geographic split")
    region_val = [s.sample_id for s in dataset.subset(base.val_ids) if s.country in spec.region and s.label(task) != UNKNOWN]
    ordered = splits._hash_order(region_val, cfg.seed + 101)
    n_eval = splits.round_half_up(splits._frac(spec.eval_fraction) * len(ordered))
    eval_ids = tuple(sorted(ordered[:n_eval]))
    schedule = splits.efficiency_schedule(dataset, base, spec.region, spec.fractions, cfg.seed, reserved=eval_ids)
    eval_set = dataset.subset(eval_ids)
    tc = cfg.train_config(task, spec.variant)
    points = []
    for i, f in enumerate(spec.fractions):
        sp = schedule.split_at(i)
        clf = adapt.train_variant(spec.variant, encoder, dataset, sp, tc, ssl_data)
        pred = adapt.predict(clf, eval_set)
        res = metrics.f1_scores(pred.labels, eval_set.labels(task), TASK_CLASSES[task], cfg.exclude_from_macro)
        points.append({"fraction": f, "n_injected": len(schedule.step_id_lists[i]), "regional_f1": res.overall(task)})
        log.info("label efficiency %s f=%.2f n=%d F1=%s", task, f, points[-1]["n_injected"], points[-1]["regional_f1"])
    return {
        "task": task,
        "region": list(spec.region),
        "variant": spec.variant,
        "pool_size": len(region_val) - len(eval_ids),
        "eval_ids": list(eval_ids),
        "points": points,
    }


# --- pipeline ------------------------------------------------------------------------


def _run_dir(cfg: ExperimentConfig, out_root: str | Path | None, started: dt.datetime) -> Path:
    root = Path(out_root or os.environ.get(ENV_OUT) or cfg.output_dir)
    stamp = started.strftime("%Y%m%dT%H%M%S%fZ")
    d = root / f"{stamp}-{cfg.config_hash}"
    d.mkdir(parents=True, exist_ok=False)
    return d


def run_experiment(cfg: ExperimentConfig, out_root: str | Path | None = None) -> Path:
    """Execute the whole pipeline and return the run directory.

    A failing stage leaves a ``FAILED`` marker (JSON with stage and cause) next
    to the partial outputs and raises ``StageError``.
    """
    apply_thread_env()
    started = dt.datetime.now(dt.timezone.utc)
    run_dir = _run_dir(cfg, out_root, started)
    timings: dict[str, float] = {}
    state: dict[str, Any] = {}
    _write_json(run_dir / "config.json", cfg.to_dict())

    def stage(name, fn):
        t0 = time.perf_counter()
        log.info("stage %s", name)
        try:
            out = fn()
        except Exception as e:
            _write_json(run_dir / "FAILED", {"stage": name, "error": type(e).__name__, "message": str(e)})
            _write_manifest(run_dir, cfg, started, timings, state, failed=name)
            raise StageError(name, e, run_dir) from e
        timings[name] = round(time.perf_counter() - t0, 3)
        return out

    data = stage("data", lambda: load_data(cfg))
    state["datasets"] = {t: adapt.fingerprint(d) for t, d in data.labeled.items()}
    if data.pretrain is not None:
        state["datasets"]["pretrain"] = adapt.fingerprint(data.pretrain)
    needs_encoder = any(v != "boosted_raw" for v in cfg.variants) or cfg.label_efficiency is not None
    pretrained = ("finetune" in cfg.variants or "ssl_then_finetune" in cfg.variants or "frozen_head" in cfg.variants
                  or (cfg.label_efficiency is not None and cfg.label_efficiency.variant != "random_init_finetune"))
    encoder = None
    if needs_encoder:
        def _pretrain():
            enc, curve = pretrain_encoder(cfg, data.pretrain if pretrained else None)
            save_encoder(enc, run_dir / "encoder.npz")
            if curve:
                _write_json(run_dir / "ssl_curve.json", curve)
                plotting.plot_loss_curve(curve, run_dir / "figures" / "ssl_curve.png")
            return enc
        encoder = stage("pretrain", _pretrain)
    ssl_data = data.labeled.get("cropland_binary") or next(iter(data.labeled.values()))

    reports = {}
    classifiers: dict[tuple[str, str, str], adapt.TrainedClassifier] = {}
    for task in cfg.tasks:
        ds = data.labeled[task]

        def _splits():
            out = {}
            for spec in cfg.splits:
                sp = make_split(ds, spec, task, cfg.seed)
                sp.save(_mk(run_dir / "splits" / f"{task}-{spec.name}.json"))
                audit = splits.audit_split(ds, sp)
                _write_json(run_dir / "audits" / f"{task}-{spec.name}.json", audit.to_dict())
                if not audit.ok:
                    raise splits.SplitError(f"{spec.name} split failed its audit: {audit.to_dict()}")
                out[spec.name] = sp
            return out

        task_splits = stage(f"splits:{task}", _splits)

        def _train():
            for sname, sp in task_splits.items():
                for mode in cfg.variants:
                    clf = adapt.train_variant(mode, encoder, ds, sp, cfg.train_config(task, mode), ssl_data)
                    clf.provenance["model_id"] = f"{task}/{sname}/{mode}"
                    p = run_dir / "models" / task / sname / f"{mode}.npz"
                    adapt.save_classifier(clf, _mk(p))
                    _write_log(p.with_suffix(".log.jsonl"), clf)
                    classifiers[(task, sname, mode)] = clf

        stage(f"train:{task}", _train)

        def _evaluate():
            rep = metrics.EvaluationReport(
                task=task,
                title=TASK_TITLES[task],
                baseline=VARIANT_LABELS[cfg.baseline] if cfg.baseline else None,
                metadata={"seed": cfg.seed, "config_hash": cfg.config_hash, "dataset": state["datasets"][task],
                          "exclude_from_macro": list(cfg.exclude_from_macro), "min_support": cfg.min_support},
            )
            for sname, sp in task_splits.items():
                sr = metrics.SplitResult(split_descriptor(ds, sp, task))
                for mode in cfg.variants:
                    sr.models[VARIANT_LABELS[mode]] = evaluate_classifier(
                        classifiers[(task, sname, mode)], ds, sp, task, cfg.min_support, cfg.exclude_from_macro)
                rep.splits[sname] = sr
            rep.validate()
            return rep

        rep = stage(f"evaluate:{task}", _evaluate)
        reports[task] = rep

        def _report():
            for fmt, ext in (("json", "json"), ("markdown", "md"), ("csv", "csv")):
                (run_dir / f"report-{task}.{ext}").write_text(metrics.render_report(rep, fmt), encoding="utf-8")
            plotting.plot_f1_bars(rep, run_dir / "figures" / f"f1-{task}.png")

        stage(f"report:{task}", _report)

        if cfg.maps and task in data.patches:
            def _maps():
                patch = data.patches[task]
                for (t, sname, mode), clf in classifiers.items():
                    if t != task:
                        continue
                    raster = mapping.predict_patch(clf, patch, cfg.tile_size)
                    mapping.write_map_outputs(raster, run_dir / "maps", f"{task}-{sname}-{mode}", patch.labels(task))
            stage(f"maps:{task}", _maps)

    if cfg.label_efficiency is not None:
        spec = cfg.label_efficiency

        def _le():
            res = run_label_efficiency(spec, cfg, data.labeled[spec.task], encoder, ssl_data)
            _write_json(run_dir / f"label_efficiency-{spec.task}.json", res)
            plotting.plot_label_efficiency(res["points"], run_dir / "figures" / f"label_efficiency-{spec.task}.png",
                                           f"{TASK_TITLES[spec.task]}: region {', '.join(spec.region)}")
            return res

        state["label_efficiency"] = stage("label_efficiency", _le)

    _write_manifest(run_dir, cfg, started, timings, state)
    return run_dir


def _mk(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _write_log(path: Path, clf: adapt.TrainedClassifier) -> None:
    rows = [dict(r, stage="ssl") for r in clf.provenance.get("ssl_curve", [])]
    rows += [dict(r, stage="train") for r in clf.provenance.get("curve", [])]
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows), encoding="utf-8")


def _write_manifest(run_dir: Path, cfg, started, timings, state, failed: str | None = None) -> None:
    files = {}
    for p in sorted(run_dir.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            files[p.relative_to(run_dir).as_posix()] = sha256_file(p)
    finished = dt.datetime.now(dt.timezone.utc)
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash,
        "datasets": state.get("datasets", {}),
        "files": files,
        "stage_seconds": timings,
        "started": started.isoformat(),
        "finished": finished.isoformat(),
        "wall_clock_seconds": round((finished - started).total_seconds(), 3),
        "status": f"failed:{failed}" if failed else "ok",
    }
    _write_json(run_dir / "manifest.json", manifest)


def load_reports(run_dir: str | Path) -> dict[str, metrics.EvaluationReport]:
    out = {}
    for p in sorted(Path(run_dir).glob("report-*.json")):
        rep = metrics.EvaluationReport.from_dict(json.loads(p.read_text(encoding="utf-8")))
        out[rep.task] = rep
    if not out:
        raise FileNotFoundError(f"no report-*.json in {run_dir}")
    return out
