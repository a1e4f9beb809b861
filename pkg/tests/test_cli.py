import json

import numpy as np
import pytest

from ibimhav.cli import run
from ibimhav.config import ConfigError, apply_overrides, load_config, load_preset
from ibimhav.profiler import flops_ibmsa, flops_msa
from ibimhav.volume import Volume, load_volume, save_volume


def test_profile_json(capsys):
    assert run(["profile", "--grid", "32,32,24", "--dim", "128", "--window", "4,4,4"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["flops_msa"] == flops_msa(32, 32, 24, 128)
    assert out["flops_ibmsa"] == flops_ibmsa(32, 32, 24, 128, 4, 4, 4)
    assert out["windows_regular"] == 384


def test_profile_table_on_stderr(capsys):
    assert run(["profile", "--grid", "8,8,8", "--dim", "16", "--table"]) == 0
    captured = capsys.readouterr()
    json.loads(captured.out)
    assert "8/27/8" in captured.err


def test_phantom_deterministic(tmp_path):
    for name in ("a", "b"):
        assert run(["phantom", "--seed", "7", "--out", str(tmp_path / name)]) == 0
    for f in ("image.rvol", "liver.rvol", "vessel.rvol"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    snap = json.loads((tmp_path / "a" / "run_config.json").read_text())
    assert snap["command"] == "phantom" and snap["args"]["seed"] == 7


def test_eval_extent_mismatch(tmp_path, capsys):
    save_volume(Volume(np.zeros((4, 4, 4))), tmp_path / "p.rvol")
    save_volume(Volume(np.zeros((4, 4, 5), np.uint8)), tmp_path / "t.rvol")
    code = run(["eval", "--pred", str(tmp_path / "p.rvol"), "--truth", str(tmp_path / "t.rvol")])
    assert code == 2
    err = capsys.readouterr().err
    assert "(4, 4, 4)" in err and "(4, 4, 5)" in err and "p.rvol" in err


def test_eval_row(tmp_path, capsys):
    t = np.zeros((10, 10, 10), np.uint8)
    t[2:8, 2:8, 2:8] = 1
    save_volume(Volume(t.astype(np.float64)), tmp_path / "p.rvol")
    save_volume(Volume(t), tmp_path / "t.rvol")
    code = run(["eval", "--pred", str(tmp_path / "p.rvol"), "--truth", str(tmp_path / "t.rvol"),
                "--case-id", "c0", "--out", str(tmp_path / "rows.jsonl")])
    assert code == 0
    row = json.loads(capsys.readouterr().out)
    assert row == {"case_id": "c0", "precision": 1.0, "sensitivity": 1.0, "dice": 1.0}
    assert json.loads((tmp_path / "rows.jsonl").read_text()) == row


def test_usage_errors(capsys):
    assert run([]) == 1
    assert run(["profile", "--grid", "8,8"]) == 1
    assert run(["eval", "--pred", "x.rvol", "--truth", "y.rvol", "--connectivity", "18"]) == 1


def test_missing_file(tmp_path, capsys):
    code = run(["eval", "--pred", str(tmp_path / "none.rvol"), "--truth", str(tmp_path / "t.rvol")])
    assert code == 2
    assert "none.rvol" in capsys.readouterr().err


def test_malformed_volume(tmp_path, capsys):
    (tmp_path / "bad.rvol").write_bytes(b"garbage\n")
    assert run(["eval", "--pred", str(tmp_path / "bad.rvol"), "--truth", str(tmp_path / "bad.rvol")]) == 2


def test_unknown_override_key(tmp_path, capsys):
    run(["phantom", "--out", str(tmp_path / "c")])
    code = run(["train", "--case", str(tmp_path / "c"), "--out", str(tmp_path / "m"),
                "--set", "train.learning_rate=0.1"])
    assert code == 1
    assert "train.learning_rate" in capsys.readouterr().err


def test_pipeline_end_to_end(tmp_path, capsys):
    assert run(["phantom", "--seed", "1", "--out", str(tmp_path / "raw")]) == 0
    assert run(["preprocess", "--case", str(tmp_path / "raw"), "--out", str(tmp_path / "pre"),
                "--target", "32,32,32"]) == 0
    assert load_volume(tmp_path / "pre" / "image.rvol").extents == (32, 32, 32)
    train_args = ["--threads", "1", "train", "--case", str(tmp_path / "pre"),
                  "--set", "train.epochs=1", "--set", "train.steps_per_epoch=2"]
    assert run(train_args + ["--out", str(tmp_path / "m1")]) == 0
    lines = (tmp_path / "m1" / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,loss" and len(lines) == 3
    snap = json.loads((tmp_path / "m1" / "run_config.json").read_text())
    assert snap["config"]["train"]["steps_per_epoch"] == 2

    # resuming continues the step count and the loss curve numbering
    resume = ["--threads", "1", "train", "--case", str(tmp_path / "pre"), "--resume", str(tmp_path / "m1"),
              "--set", "train.epochs=2", "--set", "train.steps_per_epoch=2", "--out", str(tmp_path / "m2")]
    assert run(resume) == 0
    assert json.loads((tmp_path / "m2" / "state.json").read_text())["step"] == 4
    assert (tmp_path / "m2" / "loss.csv").read_text().splitlines()[1].startswith("3,")

    assert run(["infer", "--model", str(tmp_path / "m2"), "--image", str(tmp_path / "pre" / "image.rvol"),
                "--out", str(tmp_path / "out" / "prob.rvol"), "--stride", "8"]) == 0
    prob = load_volume(tmp_path / "out" / "prob.rvol")
    assert prob.extents == (32, 32, 32) and 0 <= prob.values.min() <= prob.values.max() <= 1
    capsys.readouterr()
    assert run(["eval", "--pred", str(tmp_path / "out" / "prob.rvol"),
                "--truth", str(tmp_path / "pre" / "truth.rvol")]) == 0
    row = json.loads(capsys.readouterr().out)
    assert set(row) == {"case_id", "precision", "sensitivity", "dice"}


class TestConfig:
    def test_presets_load(self):
        desk, paper = load_preset("desk"), load_preset("paper")
        assert desk.model.patch == (32, 32, 32) and desk.model.embed_dim == 16
        assert paper.model.patch == (128, 128, 96) and paper.model.blocks == 10
        assert paper.train.lr == 3e-5 and paper.train.momentum == 0.9
        assert paper.train.weight_decay == 2e-3 and paper.train.epochs == 750
        assert paper.train.batch == 2 and paper.stride == 24

    def test_overrides(self):
        cfg = load_config("desk", ["train.lr=0.5", "model.position=\"relative_only\"", "stride=16"])
        assert cfg.train.lr == 0.5 and cfg.model.position == "relative_only" and cfg.stride == 16

    def test_bare_string_override(self):
        assert load_config("desk", ["model.upsample=trilinear"]).model.upsample == "trilinear"

    def test_unknown_keys(self):
        with pytest.raises(ConfigError):
            apply_overrides({"a": {"b": 1}}, ["a.c=2"])
        with pytest.raises(ConfigError):
            load_config("desk", ["model.depth=3"])

    def test_config_file(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"train": {"lr": 0.1}}))
        assert load_config(tmp_path / "c.json").train.lr == 0.1
        (tmp_path / "bad.json").write_text(json.dumps({"optimizer": "adam"}))
        with pytest.raises(ConfigError):
            load_config(tmp_path / "bad.json")
