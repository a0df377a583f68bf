import json
from pathlib import Path

import pytest

from poiaudit import cli, pipeline
from poiaudit.pipeline import (ArtifactStore, ConfigError, DefenseSpec, ExperimentConfig, ablation_sweep,
                               desk_preset, run_pipeline, scope_fraction)

TINY = {
    "dataset": {"source": "synth", "n_users": 30, "n_locations": 40, "n_days": 20, "seed": 1},
    "train": {"epochs": 6, "snapshot_epochs": [2]},
    "shadow_train": {"epochs": 3, "evaluate": False},
    "locmia": {"n_shadow": 2, "n_targets": 10},
    "trajmia": {"n_shadow": 2, "n_targets": 20},
    "trajextract_run": {"n_targets": 5},
    "trajextract": {"beam_width": 5, "target_length": 3},
    "defenses": [{"mechanism": "dpsgd", "epochs": 2}, {"mechanism": "jft", "epochs": 1, "protect": "targeted:0.3"},
                 {"mechanism": "geoind"}, {"mechanism": "l2"}, {"mechanism": "early-stop"}],
    "n_seeds": 2,
}


def tiny(tmp_path, **changes) -> ExperimentConfig:
    return ExperimentConfig.from_dict(dict(TINY, output_dir=str(tmp_path), **changes))


@pytest.fixture
def tiny_file(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


def test_config_round_trip_and_digest():
    cfg = desk_preset()
    back = ExperimentConfig.from_dict(json.loads(cfg.to_json()))
    assert back == cfg and back.digest() == cfg.digest()
    assert cfg.with_overrides(output_dir="elsewhere").digest() == cfg.digest()
    assert cfg.with_overrides(n_seeds=2).digest() != cfg.digest()


@pytest.mark.parametrize("doc", [
    {"nonsense": 1},
    {"train": {"epochs": 3, "learning_rate_typo": 0.1}},
    {"attacks": ["locextract", "telepathy"]},
    {"dataset": {"source": "carrier-pigeon"}},
    {"n_seeds": 0},
    {"seeds": [1, 1]},
    {"defenses": [{"mechanism": "dpsgd", "protect": "some"}]},
    {"trajmia": {"n_shadow": 1}},
    {"locmia": {"phi": "cube"}},
])
def test_bad_configs_are_rejected(doc):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(doc)


def test_defense_names_and_scope():
    assert scope_fraction("all") == ("all", 1.0)
    assert scope_fraction("targeted") == ("targeted", 0.3)
    assert scope_fraction("targeted:0.25") == ("targeted", 0.25)
    assert DefenseSpec("dpsgd", eps=1.0).name != DefenseSpec("dpsgd", eps=5.0).name


def test_missing_dataset_file_fails_validation_without_outputs(tmp_path, capsys):
    out = tmp_path / "out"
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"dataset": {"source": "file", "path": str(tmp_path / "absent.csv")},
                               "output_dir": str(out)}))
    assert cli.main(["report", "--config", str(cfg)]) == cli.EXIT_INVALID
    assert "absent.csv" in capsys.readouterr().err
    assert not out.exists()


def test_reports_are_byte_identical_across_fresh_and_cached_runs(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    ra = run_pipeline(tiny(a))
    rb = run_pipeline(tiny(b))
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    for seed in (0, 1):
        for name in ("report.json", "locextract.csv", "trajmia.csv", "locmia.csv", "defenses.csv"):
            assert (a / f"seed_{seed}" / name).read_bytes() == (b / f"seed_{seed}" / name).read_bytes()
    assert set(ra) == {"victim", "locextract", "trajextract", "locmia", "trajmia", "defenses"}
    assert ra["trajmia"].mean == rb["trajmia"].mean
    first = (a / "report.json").read_bytes()
    run_pipeline(tiny(a))
    assert (a / "report.json").read_bytes() == first
    prov = json.loads(first)["reports"]["trajmia"]["provenance"]
    assert prov["config_sha256"] == tiny(a).digest() and prov["checkpoints"]["0"]


def test_tampered_checkpoint_is_rebuilt(tmp_path):
    cfg = tiny(tmp_path, n_seeds=1, attacks=["locextract"], defenses=[])
    run_pipeline(cfg)
    ckpt = tmp_path / "seed_0" / "victim.ckpt"
    good = ckpt.read_bytes()
    report = (tmp_path / "report.json").read_bytes()
    ckpt.write_bytes(good[:-8] + b"\0" * 8)
    store = ArtifactStore(tmp_path)
    assert store.lookup("seed_0/victim", json.loads((tmp_path / "seed_0" / "victim.manifest.json").read_text())["key"]) is None
    run_pipeline(cfg)
    assert ckpt.read_bytes() == good and (tmp_path / "report.json").read_bytes() == report


def test_single_value_sweep_matches_the_plain_run(tmp_path):
    cfg = tiny(tmp_path / "s", n_seeds=1, attacks=["locextract"], defenses=[])
    rows = ablation_sweep(cfg, "query_budget", [cfg.locextract.query_budget])
    plain = run_pipeline(tiny(tmp_path / "p", n_seeds=1, attacks=["locextract"], defenses=[]))
    assert rows[0] == "query_budget,locextract.asr@1"
    assert float(rows[1].split(",")[1]) == plain["locextract"].mean["asr@1"]
    assert (tmp_path / "s" / "sweep_query_budget.csv").read_text().splitlines() == rows


def test_inapplicable_sweep_axes(tmp_path):
    cfg = tiny(tmp_path, attacks=["trajmia"])
    with pytest.raises(ConfigError):
        ablation_sweep(cfg, "nt", [5])
    with pytest.raises(ConfigError):
        ablation_sweep(cfg, "voting", ["hard"])
    with pytest.raises(ConfigError):
        ablation_sweep(cfg, "learning_rate", [0.1])
    assert not (tmp_path / "sweep_nt.csv").exists()


def test_runtime_failure_exits_2_and_flags_the_seed(tmp_path, tiny_file, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("disk on fire")
    monkeypatch.setattr(pipeline, "stage_locextract", boom)
    rc = cli.main(["attack", "locextract", "--config", str(tiny_file), "--output", str(tmp_path / "o"), "--seeds", "1"])
    assert rc == cli.EXIT_RUNTIME
    assert "disk on fire" in (tmp_path / "o" / "seed_0" / "FAILED").read_text()


def test_output_directory_from_environment(tmp_path, tiny_file, monkeypatch, capsys):
    monkeypatch.setenv(pipeline.OUTPUT_ENV, str(tmp_path / "env"))
    assert cli.main(["train", "--config", str(tiny_file), "--seeds", "1", "--epochs", "2"]) == cli.EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert Path(out["0"]["checkpoint"]).is_file() and str(tmp_path / "env") in out["0"]["checkpoint"]


def test_every_subcommand_runs(tmp_path, tiny_file, capsys):
    fixture = Path(__file__).parent / "fixtures" / "checkins_500.csv"
    ds_path = tmp_path / "fixture.json"
    assert cli.main(["synth", "--users", "5", "--locations", "8", "--days", "6", "--out", str(tmp_path / "s.json"),
                     "--truth", str(tmp_path / "truth.json")]) == 0
    assert len(json.loads((tmp_path / "truth.json").read_text())["most_common"]) == 5
    assert cli.main(["preprocess", "--input", str(fixture), "--out", str(ds_path)]) == 0
    assert cli.main(["preprocess", "--input", str(tmp_path / "nope.csv"), "--out", str(ds_path)]) == 1
    common = ["--config", str(tiny_file), "--seeds", "1", "--output", str(tmp_path / "run")]
    runs = [
        ["train", "--epochs", "3"],
        ["attack", "locextract", "--q", "5", "--voting", "hard"],
        ["attack", "trajextract", "--beta", "4", "--n", "3"],
        ["attack", "locmia", "--shadows", "2", "--nt", "3", "--nl", "3"],
        ["attack", "trajmia", "--shadows", "2"],
        ["defend", "--mechanism", "geoind", "--protect", "targeted:0.5"],
        ["analyze"],
        ["sweep", "--axis", "beam_width", "--values", "2,4"],
        ["report"],
    ]
    for argv in runs:
        capsys.readouterr()
        assert cli.main(argv + common) == cli.EXIT_OK, argv
        assert capsys.readouterr().out.strip()
    assert cli.main(["report", "--dataset", str(ds_path), "--seeds", "1", "--output", str(tmp_path / "fx"),
                     "--config", str(tiny_file)]) == 0
    assert cli.main(["sweep", "--axis", "beam_width", "--values", ""] + common) == cli.EXIT_INVALID
    assert cli.main(["report", "--preset", "desk"] + common) == cli.EXIT_INVALID
    assert cli.main(["attack", "trajmia", "--shadows", "1"] + common) == cli.EXIT_INVALID
