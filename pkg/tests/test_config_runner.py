"""Flat config parsing and end-to-end stage orchestration."""

import json

import numpy as np
import pytest

from purekit.config import RunConfig, parse_config_text
from purekit.data import load_dataset
from purekit.errors import ConfigError
from purekit import runner


def test_parse_key_value_lines():
    kv = parse_config_text("""
# a comment
seed = 7
data.n = 64
purify.eta = 0.25
stages = make-data , poison
""")
    assert kv["seed"] == "7"
    assert kv["data.n"] == "64"
    assert kv["purify.eta"] == "0.25"


def test_parse_rejects_garbage():
    with pytest.raises(ConfigError):
        parse_config_text("this is not a pair")
    with pytest.raises(ConfigError):
        parse_config_text("= value")


def test_typed_accessors():
    cfg = RunConfig({"seed": "5", "x.f": "2.5", "x.b": "true",
                     "x.list": "1,2.5,3"})
    assert cfg.seed == 5
    assert cfg.get_float("x.f") == 2.5
    assert cfg.get_bool("x.b") is True
    assert cfg.get_floats("x.list") == [1.0, 2.5, 3.0]
    with pytest.raises(ConfigError):
        cfg.get_int("x.f")
    with pytest.raises(ConfigError):
        RunConfig({}).seed  # seed is mandatory


def test_stage_list_validated_and_ordered():
    cfg = RunConfig({"seed": "1", "stages": "poison,make-data"})
    assert cfg.stages == ["make-data", "poison"]
    with pytest.raises(ConfigError):
        RunConfig({"seed": "1", "stages": "bake-data"}).stages


BASE = {
    "seed": "11",
    "data.n": "48", "data.classes": "2", "data.test_n": "24",
    "poison.kind": "triggered", "poison.budget": "0.0627",
    "poison.fraction": "0.25", "poison.target_class": "0",
    "ebm.steps": "6", "ebm.langevin_steps": "3", "ebm.batch": "16",
    "ebm.width": "8", "ebm.lr": "1e-4", "ebm.bank_init": "data",
    "ddpm.t_train": "100", "ddpm.prefix_steps": "30", "ddpm.epochs": "2",
    "ddpm.batch": "16", "ddpm.width": "8",
    "purify.ebm_steps": "4", "purify.ddpm_steps": "3", "purify.k": "1.0",
    "purify.eta": "0.25",
    "cls.epochs": "2", "cls.batch": "16", "cls.width": "8",
    "diagnose.etas": "0.25,1.0", "diagnose.lyapunov_steps": "60",
    "diagnose.bins": "8",
}


def run_config(tmp_path, extra=None, stages=None):
    values = dict(BASE)
    values["out"] = str(tmp_path / "run")
    if stages:
        values["stages"] = stages
    values.update(extra or {})
    return RunConfig(values)


def test_full_pipeline_produces_all_artifacts(tmp_path):
    cfg = run_config(tmp_path)
    manifest = runner.run(cfg)
    assert manifest["status"] == "ok"
    names = {a["name"] for a in manifest["artifacts"]}
    assert {"train_clean.pgtn", "test_clean.pgtn", "train_poisoned.pgtn",
            "poison_spec.txt", "ebm.pgck", "ddpm.pgck", "train_purified.pgtn",
            "cls.pgck", "metrics.csv", "lyapunov.csv",
            "trajectory_poisoned.csv", "energy_histogram.csv"} <= names
    assert runner.verify_manifest(tmp_path / "run") == []
    metrics = (tmp_path / "run" / "metrics.csv").read_text()
    assert metrics.startswith("metric,value\n")
    assert "natural_accuracy" in metrics and "psr_triggered" in metrics


def test_same_seed_same_hashes_different_seed_differs(tmp_path):
    m1 = runner.run(run_config(tmp_path / "a",
                               stages="make-data,poison"))
    m2 = runner.run(run_config(tmp_path / "b",
                               stages="make-data,poison"))
    assert runner.artifact_hashes(m1) == runner.artifact_hashes(m2)
    m3 = runner.run(run_config(tmp_path / "c", extra={"seed": "12"},
                               stages="make-data,poison"))
    assert runner.artifact_hashes(m1) != runner.artifact_hashes(m3)


def test_identity_purify_preserves_dataset_bytes(tmp_path):
    cfg = run_config(tmp_path, extra={"purify.ebm_steps": "0",
                                      "purify.ddpm_steps": "0",
                                      "purify.k": "0.0"},
                     stages="make-data,poison,purify")
    manifest = runner.run(cfg)
    hashes = runner.artifact_hashes(manifest)
    assert hashes["train_purified.pgtn"] == hashes["train_poisoned.pgtn"]


def test_purify_without_models_fails_with_stage_name(tmp_path):
    cfg = run_config(tmp_path, stages="make-data,poison,purify")
    with pytest.raises(ConfigError, match="stage purify"):
        runner.run(cfg)
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert manifest["status"] == "failed"
    assert manifest["failed_stage"] == "purify"
    # artifacts from completed stages are retained
    assert (tmp_path / "run" / "train_poisoned.pgtn").exists()


def test_purified_dataset_loadable_and_labels_kept(tmp_path):
    cfg = run_config(tmp_path,
                     stages="make-data,poison,train-ebm,train-ddpm,purify")
    runner.run(cfg)
    poisoned = load_dataset(tmp_path / "run" / "train_poisoned.pgtn")
    purified = load_dataset(tmp_path / "run" / "train_purified.pgtn")
    assert np.array_equal(purified.labels, poisoned.labels)
    assert purified.images.shape == poisoned.images.shape


def test_manifest_lists_hashes_that_verify(tmp_path):
    cfg = run_config(tmp_path, stages="make-data")
    runner.run(cfg)
    assert runner.verify_manifest(tmp_path / "run") == []
    # corrupt one artifact and the verification notices
    target = tmp_path / "run" / "train_clean.pgtn"
    blob = bytearray(target.read_bytes())
    blob[-1] ^= 0xFF
    target.write_bytes(bytes(blob))
    assert runner.verify_manifest(tmp_path / "run") == ["train_clean.pgtn"]
