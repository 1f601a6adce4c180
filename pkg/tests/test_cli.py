import json

import pytest

from postmortem_pad.cli import RunConfig, build_parser, main, resolve_config


def test_defaults_follow_published_protocol():
    cfg = RunConfig()
    assert (cfg.splits, cfg.test_subjects, cfg.epochs, cfg.lr, cfg.momentum, cfg.batch) == (20, 3, 10, 1e-4, 0.9, 16)


def test_flags_override_config_file(tmp_path):
    conf = tmp_path / "c.yaml"
    conf.write_text("epochs: 3\nlr: 0.01\nmin_hours: [0, 5]\n")
    args = build_parser().parse_args(["train", "--config", str(conf), "--lr", "0.5"])
    cfg = resolve_config(args)
    assert cfg.epochs == 3 and cfg.lr == 0.5 and cfg.min_hours == [0, 5] and cfg.batch == 16
    args = build_parser().parse_args(["evaluate", "--min-hours", "0", "--min-hours", "16"])
    assert resolve_config(args).min_hours == [0.0, 16.0]


def test_bad_config_exits_2(tmp_path, capsys):
    conf = tmp_path / "c.yaml"
    conf.write_text("learning_rate: 0.1\n")
    assert main(["train", "--config", str(conf)]) == 2
    assert "unknown config keys" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "none.yaml")]) == 2


def test_missing_manifest_exits_2_and_names_path(tmp_path, capsys):
    path = tmp_path / "nowhere" / "manifest.csv"
    assert main(["quality", "--manifest", str(path), "--out", str(tmp_path)]) == 2
    assert str(path) in capsys.readouterr().err


def test_evaluate_before_train_exits_2(tmp_path, capsys):
    assert main(["evaluate", "--out", str(tmp_path)]) == 2
    assert "no scored samples found" in capsys.readouterr().err


def test_synth_and_quality_write_records(tmp_path):
    data = tmp_path / "data"
    assert main(["synth", "--out", str(data), "--subjects", "3", "--images-per-subject", "2",
                 "--image-size", "48", "--seed", "2"]) == 0
    run = tmp_path / "run"
    assert main(["quality", "--manifest", str(data / "manifest.csv"), "--out", str(run)]) == 0
    record = json.loads((run / "run_record_quality.json").read_text())
    assert record["config"]["manifest"] == str(data / "manifest.csv")
    assert "normalization_tag" in record and record["code_version"]
    listed = json.loads((run / "outputs_quality.json").read_text())["files"]
    assert "quality/quality_report.json" in listed and all((run / f).is_file() for f in listed)


def test_training_divergence_exits_3(tmp_path):
    data = tmp_path / "data"
    main(["synth", "--out", str(data), "--subjects", "3", "--images-per-subject", "4", "--image-size", "48"])
    rc = main(["train", "--manifest", str(data / "manifest.csv"), "--out", str(tmp_path / "run"),
               "--backbone", "vgg16_surrogate", "--input-size", "32", "--splits", "1", "--test-subjects", "1",
               "--epochs", "2", "--lr", "1e6"])
    assert rc == 3


@pytest.mark.slow
def test_full_pipeline_and_idempotent_evaluate(tmp_path):
    data = tmp_path / "data"
    run = tmp_path / "run"
    assert main(["synth", "--out", str(data), "--subjects", "4", "--images-per-subject", "4",
                 "--image-size", "64", "--seed", "1"]) == 0
    common = ["--manifest", str(data / "manifest.csv"), "--out", str(run)]
    assert main(["quality", *common]) == 0
    assert main(["train", *common, "--backbone", "vgg16_surrogate", "--input-size", "32", "--splits", "2",
                 "--test-subjects", "1", "--epochs", "1"]) == 0
    assert (run / "models" / "split_02.pt").is_file()
    assert (run / "logs" / "train_split_01.csv").read_text().startswith("epoch,mean_loss,train_accuracy\n")
    assert main(["evaluate", *common, "--min-hours", "0", "--min-hours", "16"]) == 0
    first = (run / "eval" / "eval_report.json").read_bytes()
    plots = {p.name: p.read_bytes() for p in (run / "eval").glob("*.svg")}
    assert main(["evaluate", *common, "--min-hours", "0", "--min-hours", "16"]) == 0
    assert (run / "eval" / "eval_report.json").read_bytes() == first
    assert {p.name: p.read_bytes() for p in (run / "eval").glob("*.svg")} == plots
    report = json.loads(first)
    assert len(report["per_split_accuracy"]) == 2
    assert main(["explain", *common, "--per-class", "1", "--layer", "conv4_3"]) == 0
    assert len(list((run / "explain").glob("*__panel.png"))) == 2
