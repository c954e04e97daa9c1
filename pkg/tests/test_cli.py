import json
from pathlib import Path

import pytest

from fmdeploy import cli
from fmdeploy.experiment import ConfigError, ExperimentConfig, config_from_dict, load_config
from fmdeploy.splits import CROPLAND_HOLDOUT, DatasetSplit

SMALL_RUN = """
name = "cli-small"
seed = 1
tasks = ["cropland_binary"]
variants = ["boosted_raw", "random_init_finetune", "finetune"]

[data]
synthetic = true
scale = 0.03

[[splits]]
strategy = "geographic"

[encoder]
embed_dim = 8
num_heads = 2
depth = 1
mlp_ratio = 2

[pretrain]
epochs = 1

[train]
epochs = 1
n_trees = 10

[eval]
baseline = "boosted_raw"

[maps]
tile_size = 4
"""


def _run(argv, capsys):
    rc = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return rc, out, err


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    (out / "gen.toml").write_text("seed = 0\nscale = 0.02\npatch_size = 6\n")
    assert cli.main(["datagen", "--config", str(out / "gen.toml"), "--out", str(out)]) == 0
    return out


def test_datagen_writes_benchmark(generated):
    for name in ("pretrain", "cropland", "croptype"):
        assert (generated / f"{name}.jsonl").stat().st_size > 0
    assert (generated / "patches" / "cropland.fmpatch").exists()


def test_split_preset_holds_out_cropland_countries(generated, tmp_path, capsys):
    cfg = tmp_path / "g.toml"
    cfg.write_text(f'dataset = "{generated / "cropland.jsonl"}"\ntask = "cropland_binary"\n'
                   '[split]\nstrategy = "geographic"\n')
    rc, out, _ = _run(["split", "--config", cfg, "--out", tmp_path], capsys)
    assert rc == 0
    sp = DatasetSplit.load(json.loads(out)["split"])
    assert set(sp.holdout["countries"]) == set(CROPLAND_HOLDOUT)
    assert set(sp.holdout["countries"]) == {"ES", "NG", "LV", "TZ", "ET", "AR"}

    rc, out, _ = _run(["audit", "--dataset", generated / "cropland.jsonl", "--split", tmp_path / "split-geographic.json",
                       "--out", tmp_path], capsys)
    assert rc == 0
    audit = json.loads((tmp_path / "audit.json").read_text())
    assert audit["leakage_count"] == 0 and audit["ok"]


def test_audit_failure_exit_code(generated, tmp_path, capsys):
    rc, out, _ = _run(["split", "--dataset", generated / "cropland.jsonl", "--strategy", "geographic",
                       "--out", tmp_path], capsys)
    path = Path(json.loads(out)["split"])
    raw = json.loads(path.read_text())
    leaked = raw["val_ids"].pop(0)  # a held-out-country sample moved to the train side
    raw["train_ids"] = sorted(raw["train_ids"] + [leaked])
    path.write_text(json.dumps(raw))
    rc, _, err = _run(["audit", "--dataset", generated / "cropland.jsonl", "--split", path, "--out", tmp_path], capsys)
    assert rc == 3
    assert json.loads(err.strip().splitlines()[-1])["error"] == "AuditFailed"


def test_config_errors_reported_together(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text('seed = -1\ntasks = ["soil"]\nvariants = []\ncolour = "red"\n[encoder]\nembed_dim = 7\nnum_heads = 2\n')
    rc, _, err = _run(["run", "--config", bad, "--out", tmp_path], capsys)
    assert rc == 2
    payload = json.loads(err)
    assert payload["error"] == "ConfigError"
    joined = " ".join(payload["errors"])
    for needle in ("seed", "tasks", "variants", "colour", "encoder"):
        assert needle in joined
    assert not [p for p in tmp_path.iterdir() if p.is_dir()]  # rejected before a run directory exists


def test_missing_dataset_named_before_training(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('tasks = ["cropland_binary"]\n[data]\nsynthetic = false\n[data.labeled]\ncropland_binary = "nope.jsonl"\n')
    with pytest.raises(ConfigError) as e:
        load_config(cfg)
    assert str(tmp_path / "nope.jsonl") in str(e.value)
    assert not list(tmp_path.glob("runs*"))


def test_missing_config_file(tmp_path, capsys):
    rc, _, err = _run(["run", "--config", tmp_path / "absent.toml"], capsys)
    assert rc == 2 and "not found" in err


def test_runtime_failure_is_json(tmp_path, capsys):
    rc, _, err = _run(["audit", "--dataset", tmp_path / "x.jsonl", "--split", tmp_path / "y.json"], capsys)
    assert rc == 1
    assert set(json.loads(err)) == {"error", "message"}


def test_flags_override_config():
    raw = {"seed": 4, "variants": ["finetune"], "data": {"scale": 0.5}}
    cfg = config_from_dict(raw)
    assert cfg.seed == 4 and cfg.variants == ("finetune",) and cfg.scale == 0.5
    args = cli.build_parser().parse_args(["run", "--seed", "9"])
    assert cli._experiment_config(args) == ExperimentConfig(seed=9)


def test_baseline_must_be_a_variant():
    with pytest.raises(ConfigError, match="baseline"):
        config_from_dict({"variants": ["finetune"], "eval": {"baseline": "boosted_raw"}})


def test_every_subcommand_takes_common_flags():
    parser = cli.build_parser()
    for name in cli.COMMANDS:
        args = parser.parse_args([name, "--config", "c.toml", "--seed", "3", "--out", "o"])
        assert (args.config, args.seed, args.out) == ("c.toml", 3, "o")


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    (root / "run.toml").write_text(SMALL_RUN)
    assert cli.main(["run", "--config", str(root / "run.toml"), "--out", str(root)]) == 0
    (run_dir,) = [p for p in root.iterdir() if p.is_dir()]
    return run_dir


def test_run_directory_contents(small_run):
    manifest = json.loads((small_run / "manifest.json").read_text())
    assert manifest["status"] == "ok"
    files = {p.relative_to(small_run).as_posix() for p in small_run.rglob("*") if p.is_file()}
    assert files - {"manifest.json"} == set(manifest["files"])
    for name in ("report-cropland_binary.json", "encoder.npz", "figures/f1-cropland_binary.png",
                 "models/cropland_binary/geographic/finetune.npz"):
        assert name in files
    assert any(f.startswith("maps/") and f.endswith(".png") for f in files)
    assert small_run.name.endswith(load_config(small_run.parent / "run.toml").config_hash)


def test_report_contains_requested_rows(small_run):
    rep = json.loads((small_run / "report-cropland_binary.json").read_text())
    models = rep["splits"]["geographic"]["models"]
    assert set(models) == {"Unprocessed boosted trees", "Random-init finetuned encoder", "Finetuned encoder"}


def test_report_subcommand_markdown(small_run, tmp_path, capsys):
    rc, out, _ = _run(["report", "--run", small_run, "--format", "markdown", "--out", tmp_path], capsys)
    assert rc == 0
    assert "| Finetuned encoder |" in out
    assert "## Ranking (cropland_binary)" in out
    assert (tmp_path / "f1-cropland_binary.png").read_bytes()[:4] == b"\x89PNG"
    md = (tmp_path / "report-cropland_binary.md").read_text()
    assert md == (small_run / "report-cropland_binary.md").read_text()


def test_train_evaluate_map_chain(generated, tmp_path, capsys):
    ds = generated / "cropland.jsonl"
    _, out, _ = _run(["split", "--dataset", ds, "--strategy", "random", "--out", tmp_path], capsys)
    split = json.loads(out)["split"]
    cfg = tmp_path / "t.toml"
    cfg.write_text("[train]\nn_trees = 10\n")
    rc, out, _ = _run(["train", "--config", cfg, "--dataset", ds, "--split", split, "--mode", "boosted_raw",
                       "--out", tmp_path], capsys)
    assert rc == 0
    clf = json.loads(out)["classifier"]
    rc, out, _ = _run(["evaluate", "--dataset", ds, "--split", split, "--classifier", clf, "--out", tmp_path], capsys)
    assert rc == 0 and "Unprocessed boosted trees" in out
    rc, out, _ = _run(["map", "--classifier", clf, "--patch", generated / "patches" / "cropland.fmpatch",
                       "--out", tmp_path], capsys)
    assert rc == 0
    assert Path(json.loads(out)["png"]).exists()


@pytest.mark.parametrize("name", ["smoke.toml", "benchmark.toml"])
def test_shipped_configs_validate(name):
    cfg = load_config(Path(__file__).parents[1] / "configs" / name)
    assert cfg.variants and cfg.tasks
