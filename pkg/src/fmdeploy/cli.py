"""``fmdeploy`` command line: datagen, split, audit, pretrain, train, evaluate, map, report, run.

Every subcommand takes ``--config`` (TOML), ``--seed`` and ``--out``. Explicit
flags win over config keys. Failures exit nonzero with a JSON error on stderr.
``FMDEPLOY_OUT`` sets the default output root, ``FMDEPLOY_THREADS`` the torch
thread count.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

from fmdeploy import adapt, experiment, mapping, metrics, plotting, splits
from fmdeploy.data import TASK_CLASSES, UNKNOWN, load_dataset, write_dataset
from fmdeploy.encoder import build_encoder, load_encoder, save_encoder
from fmdeploy.experiment import ConfigError, tomllib
from fmdeploy.synth import SynthConfig, benchmark_configs, default_patches, generate_dataset

log = logging.getLogger("fmdeploy")


class CliError(RuntimeError):
    pass


def _read_toml(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError([f"config file not found: {p}"])
    try:
        return tomllib.loads(p.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as e:
        raise ConfigError([f"{p}: invalid TOML: {e}"]) from None


def _rel(path: str | None, args) -> str | None:
    """Resolve a config-supplied path against the config file's directory."""
    if path is None or Path(path).is_absolute() or not args.config:
        return path
    return str(Path(args.config).parent / path)


def _pick(flag: Any, raw: dict, key: str, args, is_path: bool = False, default=None):
    if flag is not None:
        return flag
    if key in raw:
        return _rel(raw[key], args) if is_path else raw[key]
    return default


def _require(value, name: str):
    if value is None:
        raise ConfigError([f"{name} is required (flag or config key)"])
    return value


def _out(args, default: str = ".") -> Path:
    out = Path(args.out or os.environ.get(experiment.ENV_OUT) or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# --- subcommands ---------------------------------------------------------------------


def cmd_datagen(args) -> None:
    raw = _read_toml(args.config)
    seed = args.seed if args.seed is not None else int(raw.get("seed", 0))
    out = _out(args)
    written = {}
    if "countries" in raw:
        cfg = SynthConfig.from_dict({k: v for k, v in raw.items() if k not in ("scale", "patches")} | {"seed": seed})
        ds = generate_dataset(cfg)
        write_dataset(ds, out / f"{cfg.tag}.jsonl")
        written[cfg.tag] = len(ds)
    else:
        scale = float(raw.get("scale", 1.0))
        for name, cfg in benchmark_configs(seed).items():
            if scale != 1.0:
                cfg = replace(cfg, countries=tuple(replace(c, n_samples=int(round(c.n_samples * scale))) for c in cfg.countries))
            ds = generate_dataset(cfg)
            write_dataset(ds, out / f"{name}.jsonl")
            written[name] = len(ds)
        for name, patch in default_patches(seed, int(raw.get("patch_size", 16))).items():
            (out / "patches").mkdir(exist_ok=True)
            mapping.write_patch(patch, out / "patches" / f"{name}.fmpatch")
            written[f"patch:{name}"] = list(patch.shape)
    _emit({"out": str(out), "seed": seed, "written": written})


def _split_from(raw: dict, args):
    sec = raw.get("split", raw)
    dataset_path = _require(_pick(args.dataset, raw, "dataset", args, True), "dataset")
    task = _pick(args.task, raw, "task", args, default="cropland_binary")
    if task not in TASK_CLASSES:
        raise ConfigError([f"unknown task {task!r}"])
    strategy = _pick(args.strategy, sec, "strategy", args, default="geographic")
    seed = args.seed if args.seed is not None else int(raw.get("seed", 0))
    ds = load_dataset(dataset_path)
    spec = experiment.SplitSpec(
        strategy,
        float(sec.get("ratio", 0.8)),
        tuple(sec["countries"]) if "countries" in sec else None,
        tuple(int(y) for y in sec.get("years", splits.TEMPORAL_HOLDOUT)),
    )
    if strategy not in splits.STRATEGIES:
        raise ConfigError([f"unknown split strategy {strategy!r}"])
    return ds, experiment.make_split(ds, spec, task, seed)


def cmd_split(args) -> None:
    raw = _read_toml(args.config)
    ds, sp = _split_from(raw, args)
    path = _out(args) / f"split-{sp.strategy}.json"
    sp.save(path)
    audit = splits.audit_split(ds, sp)
    _emit({"split": str(path), "split_id": sp.split_id, "n_train": len(sp.train_ids), "n_val": len(sp.val_ids),
           "holdout": sp.holdout, "purity": audit.purity, "leakage_count": audit.leakage_count})


def cmd_audit(args) -> int:
    raw = _read_toml(args.config)
    ds = load_dataset(_require(_pick(args.dataset, raw, "dataset", args, True), "dataset"))
    sp = splits.DatasetSplit.load(_require(_pick(args.split, raw, "split", args, True), "split"))
    rep = splits.audit_split(ds, sp)
    out = _out(args)
    (out / "audit.json").write_text(json.dumps(rep.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    sys.stdout.write(rep.to_text())
    if not rep.ok:
        sys.stderr.write(json.dumps({"error": "AuditFailed", "message": "split failed its audit",
                                     "leakage_count": rep.leakage_count}) + "\n")
        return 3
    return 0


def _experiment_config(args) -> experiment.ExperimentConfig:
    if args.config:
        cfg = experiment.load_config(args.config)
    else:
        cfg = experiment.ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def cmd_pretrain(args) -> None:
    cfg = _experiment_config(args)
    raw = _read_toml(args.config)
    path = _pick(args.dataset, raw.get("data", {}), "pretrain", args, True)
    unlabeled = load_dataset(path) if path else experiment.load_data(replace(cfg, tasks=("cropland_binary",))).pretrain
    if args.epochs is not None:
        cfg = replace(cfg, pretrain_epochs=args.epochs)
    enc, curve = experiment.pretrain_encoder(replace(cfg, encoder_path=None), unlabeled)
    out = _out(args)
    save_encoder(enc, out / "encoder.npz")
    (out / "ssl_curve.json").write_text(json.dumps(curve, indent=1) + "\n", encoding="utf-8")
    if curve:
        plotting.plot_loss_curve(curve, out / "ssl_curve.png")
    _emit({"encoder": str(out / "encoder.npz"), "curve": curve})


def cmd_train(args) -> None:
    raw = _read_toml(args.config)
    ds = load_dataset(_require(_pick(args.dataset, raw, "dataset", args, True), "dataset"))
    sp = splits.DatasetSplit.load(_require(_pick(args.split, raw, "split", args, True), "split"))
    task = _pick(args.task, raw, "task", args, default="cropland_binary")
    mode = _pick(args.mode, raw, "mode", args, default="finetune")
    seed = args.seed if args.seed is not None else int(raw.get("seed", 0))
    train_kw = {k: v for k, v in raw.get("train", {}).items() if k in experiment._TRAIN_KEYS}
    try:
        tc = adapt.TrainConfig(task=task, mode=mode, seed=seed, **train_kw)
        tc.validate()
    except (TypeError, ValueError) as e:
        raise ConfigError([f"train: {e}"]) from None
    enc_path = _pick(args.encoder, raw, "encoder", args, True)
    encoder = load_encoder(enc_path) if enc_path else build_encoder(seed=seed)
    if mode in ("finetune", "frozen_head", "ssl_then_finetune") and not enc_path:
        log.warning("no pretrained encoder given; %s starts from a freshly built encoder", mode)
    clf = adapt.train_variant(mode, encoder, ds, sp, tc, ds if mode == "ssl_then_finetune" else None)
    out = _out(args)
    path = out / f"{task}-{mode}.npz"
    adapt.save_classifier(clf, path)
    experiment._write_log(path.with_suffix(".log.jsonl"), clf)
    _emit({"classifier": str(path), "sha256": experiment.sha256_file(path)})


def cmd_evaluate(args) -> None:
    raw = _read_toml(args.config)
    ds = load_dataset(_require(_pick(args.dataset, raw, "dataset", args, True), "dataset"))
    sp = splits.DatasetSplit.load(_require(_pick(args.split, raw, "split", args, True), "split"))
    paths = args.classifier or [_rel(p, args) for p in raw.get("classifiers", [])]
    if not paths:
        raise ConfigError(["at least one --classifier is required"])
    clfs = [adapt.load_classifier(p) for p in paths]
    tasks = {c.task for c in clfs}
    if len(tasks) != 1:
        raise ConfigError([f"classifiers mix tasks: {sorted(tasks)}"])
    task = tasks.pop()
    min_support = int(raw.get("min_support", metrics.DEFAULT_MIN_SUPPORT))
    exclude = tuple(raw.get("exclude_from_macro", ()))
    sr = metrics.SplitResult(experiment.split_descriptor(ds, sp, task))
    for p, clf in zip(paths, clfs):
        name = experiment.VARIANT_LABELS.get(clf.provenance.get("config", {}).get("mode"), Path(p).stem)
        sr.models[name] = experiment.evaluate_classifier(clf, ds, sp, task, min_support, exclude)
    rep = metrics.EvaluationReport(task, {sp.strategy: sr}, title=experiment.TASK_TITLES[task],
                                   metadata={"dataset": adapt.fingerprint(ds)})
    rep.validate()
    out = _out(args)
    (out / f"report-{task}.json").write_text(metrics.render_json(rep), encoding="utf-8")
    (out / f"report-{task}.md").write_text(metrics.render_markdown(rep), encoding="utf-8")
    sys.stdout.write(metrics.render_markdown(rep))


def cmd_map(args) -> None:
    raw = _read_toml(args.config)
    clf = adapt.load_classifier(_require(_pick(args.classifier[0] if args.classifier else None, raw, "classifier", args, True), "classifier"))
    patch_path = _pick(args.patch, raw, "patch", args, True)
    if patch_path:
        patch, _ = mapping.read_patch(patch_path)
    else:
        seed = args.seed if args.seed is not None else int(raw.get("seed", 0))
        patch = default_patches(seed)[experiment.TASK_DATA[clf.task]]
    tile = int(_pick(args.tile_size, raw, "tile_size", args, default=64))
    raster = mapping.predict_patch(clf, patch, tile)
    out = _out(args)
    name = f"{patch.patch_id}-{clf.provenance.get('config', {}).get('mode', clf.kind)}"
    gt = patch.labels(clf.task)
    side = mapping.write_map_outputs(raster, out, name, gt, scale=int(raw.get("scale", 8)))
    _emit({"png": str(out / f"{name}.png"), "sidecar": side})


def cmd_report(args) -> None:
    raw = _read_toml(args.config)
    run = _require(_pick(args.run, raw, "run", args, True), "run directory (--run)")
    fmt = args.format or raw.get("format", "markdown")
    reports = experiment.load_reports(run)
    out = Path(args.out) if args.out else None
    for task, rep in reports.items():
        text = metrics.render_report(rep, fmt)
        sys.stdout.write(text)
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            ext = {"markdown": "md", "json": "json", "csv": "csv"}[fmt]
            (out / f"report-{task}.{ext}").write_text(text, encoding="utf-8")
            plotting.plot_f1_bars(rep, out / f"f1-{task}.png")
    if len(reports) and all(r.splits for r in reports.values()):
        for task, rep in reports.items():
            sys.stdout.write(f"\n## Ranking ({task})\n\n" + metrics.render_rankings(metrics.compare_models(rep)))


def cmd_run(args) -> None:
    cfg = _experiment_config(args)
    run_dir = experiment.run_experiment(cfg, args.out)
    manifest = json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))
    _emit({"run_dir": str(run_dir), "status": manifest["status"], "stage_seconds": manifest["stage_seconds"]})


COMMANDS = {
    "datagen": (cmd_datagen, "generate the synthetic benchmark (or a custom SynthConfig) as JSON-lines + patches"),
    "split": (cmd_split, "build a random / geographic / temporal split file"),
    "audit": (cmd_audit, "check a split for overlap, holdout leakage and class coverage"),
    "pretrain": (cmd_pretrain, "masked-reconstruction pretraining of a fresh encoder"),
    "train": (cmd_train, "train one model variant on a split"),
    "evaluate": (cmd_evaluate, "evaluate classifiers on a split's validation side"),
    "map": (cmd_map, "predict and render a raster patch"),
    "report": (cmd_report, "render the reports of a run directory"),
    "run": (cmd_run, "full pipeline from an experiment config"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fmdeploy", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory (default: $FMDEPLOY_OUT or .)")
        if name in ("split", "audit", "pretrain", "train", "evaluate"):
            p.add_argument("--dataset", help="dataset JSON-lines file")
        if name in ("split", "train"):
            p.add_argument("--task", choices=sorted(TASK_CLASSES))
        if name == "split":
            p.add_argument("--strategy", choices=splits.STRATEGIES)
        if name in ("audit", "train", "evaluate"):
            p.add_argument("--split", help="split JSON file")
        if name == "pretrain":
            p.add_argument("--epochs", type=int)
        if name == "train":
            p.add_argument("--mode", choices=adapt.MODES)
            p.add_argument("--encoder", help="pretrained encoder .npz")
        if name in ("evaluate", "map"):
            p.add_argument("--classifier", action="append", help="classifier .npz (repeatable)")
        if name == "map":
            p.add_argument("--patch", help="patch file (default: the synthetic patch for the task)")
            p.add_argument("--tile-size", type=int, dest="tile_size")
        if name == "report":
            p.add_argument("--run", help="run directory")
            p.add_argument("--format", choices=("markdown", "json", "csv"))
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    experiment.apply_thread_env()
    try:
        rc = COMMANDS[args.command][0](args)
        return int(rc or 0)
    except ConfigError as e:
        sys.stderr.write(json.dumps({"error": "ConfigError", "errors": e.errors}) + "\n")
        return 2
    except experiment.StageError as e:
        sys.stderr.write(json.dumps({"error": "StageError", "stage": e.stage, "cause": type(e.cause).__name__,
                                     "message": str(e.cause), "run_dir": str(e.run_dir)}) + "\n")
        return 1
    except Exception as e:  # noqa: BLE001 - every failure becomes a JSON error line
        sys.stderr.write(json.dumps({"error": type(e).__name__, "message": str(e)}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
