import csv
import json

import numpy as np
import pytest

from divconq.cli import main
from divconq.dataset import load_features
from divconq.experiment import (OUTPUT_ENV, apply_overrides, load_run_config,
                                run_sweep)
from divconq.trainer import ConfigError

FAST = ["--set", "total_epochs=3", "--set", "embedding_dim=8",
        "--set", "hidden_dims=[16]", "--set", "data.synthetic.class_count=8",
        "--set", "data.synthetic.samples_per_class=12"]


def read(path):
    return path.read_bytes()


def test_overrides():
    cfg = apply_overrides({"trainer": {}, "data": {"synthetic": {}}},
                          ["k_max=8", "trainer.lambda=0.2",
                           "data.synthetic.seed=3", "division_mode=random_splits"])
    assert cfg["trainer"] == {"k_max": 8, "lambda": 0.2,
                              "division_mode": "random_splits"}
    assert cfg["data"]["synthetic"]["seed"] == 3
    with pytest.raises(ConfigError):
        apply_overrides({}, ["k_max"])


def test_config_file_and_errors(tmp_path):
    p = tmp_path / "base.json"
    p.write_text(json.dumps({"k_max": 2, "total_epochs": 1}))
    cfg = load_run_config(p, ["k_max=1"])
    assert cfg["trainer"] == {"k_max": 1, "total_epochs": 1}
    with pytest.raises(ConfigError) as exc:
        load_run_config(p, ["k_max=3"])
    assert exc.value.field == "k_max"
    with pytest.raises(ConfigError):
        load_run_config(None, ["no_such_field=1"])


def test_train_writes_artifacts(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path), "--name", "a", *FAST]) == 0
    run = tmp_path / "a"
    for f in ("config.json", "checkpoint.json", "events.jsonl", "metrics.csv",
              "report.json", "masks.csv"):
        assert (run / f).exists()
    rows = list(csv.DictReader(open(run / "metrics.csv")))
    assert [r["epoch"] for r in rows] == ["1", "2", "3"]
    assert {"train_recall@1", "test_recall@1"} <= set(rows[0])
    events = [json.loads(line) for line in open(run / "events.jsonl")]
    assert all({"epoch", "step", "cluster", "loss", "phase"} <= set(e)
               for e in events if "loss" in e)
    report = json.loads((run / "report.json").read_text())
    assert set(report) == {"test", "train"}


def test_train_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main(["train", "--out", str(tmp_path), "--name", name, *FAST,
                     "--set", "division_mode=random_splits"]) == 0
    for f in ("metrics.csv", "checkpoint.json", "events.jsonl", "report.json",
              "masks.csv"):
        a, b = read(tmp_path / "a" / f), read(tmp_path / "b" / f)
        if f == "checkpoint.json":
            a = a.replace(b'"name": "a"', b'"name": "b"')
        assert a == b


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
    assert main(["train", "--name", "r", *FAST]) == 0
    assert (tmp_path / "env" / "r" / "report.json").exists()


def test_invalid_config_exit_code(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path), "--set", "k_max=3"]) == 2
    assert "k_max" in capsys.readouterr().err


def test_gen_data_eval_project(tmp_path, capsys):
    data = tmp_path / "d.csv"
    assert main(["gen-data", "--out", str(data), "--set", "class_count=4",
                 "--set", "samples_per_class=6", "--set", "feature_dim=20"]) == 0
    assert len(load_features(data)) == 24
    assert main(["train", "--out", str(tmp_path), "--name", "r", *FAST]) == 0
    ck = str(tmp_path / "r" / "checkpoint.json")
    capsys.readouterr()
    assert main(["eval", "--checkpoint", ck]) == 0
    first = capsys.readouterr().out
    assert main(["eval", "--checkpoint", ck, "--out", str(tmp_path / "e.json")]) == 0
    assert capsys.readouterr().out == first
    assert json.loads(first)["recall_at"]
    assert main(["eval", "--checkpoint", ck, "--data", str(data)]) == 0
    proj = tmp_path / "p.csv"
    assert main(["project", "--checkpoint", ck, "--out", str(proj)]) == 0
    rows = list(csv.DictReader(open(proj)))
    assert list(rows[0]) == ["x", "y", "label", "split"]
    assert {r["split"] for r in rows} == {"train", "test"}
    bad = tmp_path / "bad.csv"
    assert main(["gen-data", "--out", str(bad), "--set", "feature_dim=3",
                 "--set", "class_count=2", "--set", "samples_per_class=2"]) == 0
    assert main(["eval", "--checkpoint", ck, "--data", str(bad)]) == 2
    assert main(["project", "--checkpoint", ck, "--data", str(bad),
                 "--out", str(proj)]) == 2


def test_eval_on_training_data_of_toy_run(tmp_path):
    assert main(["train", "--out", str(tmp_path), "--name", "toy",
                 "--set", "total_epochs=30", "--set", "k_max=1",
                 "--set", "data.synthetic.class_count=4",
                 "--set", "data.synthetic.samples_per_class=10",
                 "--set", "data.synthetic.nuisance_dims=0",
                 "--set", "data.synthetic.intra_mode_sigma=0.2"]) == 0
    report = json.loads((tmp_path / "toy" / "report.json").read_text())
    assert report["train"]["recall_at"]["1"] >= 0.95


def test_sweep_resume_and_failures(tmp_path, capsys):
    plan = {"base": {"trainer": {"total_epochs": 2, "embedding_dim": 8,
                                 "hidden_dims": [8]},
                     "data": {"synthetic": {"class_count": 8,
                                            "samples_per_class": 12}}},
            "runs": [{"name": f"k{k}", "set": {"k_max": k}} for k in (4, 1, 2)]
            + [{"name": "broken", "set": {"k_max": 3}}]}
    p = tmp_path / "plan.json"
    p.write_text(json.dumps(plan))
    out = tmp_path / "sw"
    assert main(["sweep", "--plan", str(p), "--out", str(out)]) == 1
    rows = list(csv.DictReader(open(out / "summary.csv")))
    assert [r["name"] for r in rows] == ["broken", "k1", "k2", "k4"]
    assert rows[0]["status"].startswith("error")
    assert [r["k_max"] for r in rows[1:]] == ["1", "2", "4"]
    assert set(rows[1]) >= {"recall@1", "nmi", "marp", "effective_dim",
                            "runtime_s", "E"}
    plan["runs"] = plan["runs"][:3]
    p.write_text(json.dumps(plan))
    capsys.readouterr()
    assert main(["sweep", "--plan", str(p), "--out", str(out), "--resume"]) == 0
    assert capsys.readouterr().out.count("[skip]") == 3


def test_sweep_names_unique():
    with pytest.raises(ConfigError):
        run_sweep({"runs": [{"name": "a"}, {"name": "a"}]}, "unused",
                  log=lambda *_: None)
