import hashlib
import json

import pytest

from epic_lab.cli import main
from epic_lab.world import read_dataset


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "d.jsonl"
    assert main(["gen-data", "--n", "120", "--seed", "3", "--out", str(path)]) == 0
    return path


def test_gen_data_is_deterministic(data, tmp_path):
    other = tmp_path / "again.jsonl"
    assert main(["gen-data", "--n", "120", "--seed", "3", "--out", str(other)]) == 0
    assert hashlib.sha256(other.read_bytes()).digest() == hashlib.sha256(data.read_bytes()).digest()
    assert len(read_dataset(other)) == 120


def test_missing_data_names_the_flag(tmp_path, capsys):
    code = main(["train-epic", "--data", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path)])
    assert code == 1 and "--data" in capsys.readouterr().err


def test_unknown_flag_and_bad_values_are_usage_errors(data, tmp_path):
    assert main(["train-epic", "--bogus"]) == 1
    assert main([]) == 1
    assert main(["train-epic", "--data", str(data), "--out", str(tmp_path), "--mask-ratio", "1.5"]) == 1
    assert main(["train-epic", "--data", str(data), "--out", str(tmp_path), "--objectives", "itm,xyz"]) == 1


def test_bad_log_level_is_usage_error(monkeypatch):
    monkeypatch.setenv("EPIC_LAB_LOG", "loud")
    assert main(["gen-data", "--n", "1", "--out", "/dev/null"]) == 1


def test_corrupt_checkpoint_exits_3(data, tmp_path):
    ckpt = tmp_path / "bad.ckpt"
    ckpt.write_bytes(b"EPIC1 not really")
    assert main(["eval", "--data", str(data), "--model", str(ckpt)]) == 3


def test_malformed_dataset_exits_3(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json}\n")
    assert main(["train-baseline", "--data", str(bad), "--out", str(tmp_path / "o"), "--steps", "1"]) == 3


def test_train_epic_manifest_and_outputs(data, tmp_path):
    out = tmp_path / "run"
    code = main(["train-epic", "--data", str(data), "--out", str(out), "--steps", "3", "--batch", "4",
                 "--seed", "2", "--objectives", "itm,mlm,itc"])
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["mask_ratio"] == 0.35 and manifest["config"]["lambda_itc"] == 8.0
    assert manifest["seed"] == 2 and manifest["dataset_sha256"] == hashlib.sha256(data.read_bytes()).hexdigest()
    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 3 and json.loads(lines[0])["seed"] == 2
    assert (out / "vlm.ckpt").is_file() and list((out / "epochs").iterdir())


def test_config_file_then_flags(data, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("mask_ratio = 0.25\nsteps = 2\nbatch = 4\nlambda_itc = 2\n")
    out = tmp_path / "run"
    assert main(["train-epic", "--data", str(data), "--out", str(out), "--config", str(cfg),
                 "--lambda", "4", "--objectives", "itm,itc"]) == 0
    config = json.loads((out / "manifest.json").read_text())["config"]
    assert config["mask_ratio"] == 0.25 and config["lambda_itc"] == 4.0 and config["steps"] == 2


def test_dagger_cmlm_requires_teacher(data, tmp_path):
    assert main(["train-dagger-cmlm", "--data", str(data), "--out", str(tmp_path), "--steps", "1"]) == 1


def test_replay_reproduces_metrics(data, tmp_path):
    out = tmp_path / "run"
    argv = ["train-baseline", "--data", str(data), "--out", str(out), "--steps", "2", "--batch", "4"]
    assert main(argv) == 0
    first = (out / "metrics.jsonl").read_bytes()
    assert main(["replay", str(out / "manifest.json")]) == 0
    assert (out / "metrics.jsonl").read_bytes() == first
