import json
import os

import numpy as np
import pytest

from bafnet.cli import EXIT_IO, EXIT_OK, EXIT_USAGE, main
from bafnet.core.checkpoint import load_checkpoint
from bafnet.core.data import DEFAULT_PALETTE, synth_generate
from bafnet.utils.image_utils import read_rgb, write_rgb
from conftest import TINY_FLAGS

QUICK_TRAIN_FLAGS = [
    "--seed", "0", "--epochs", "1", "--batch-size", "4", "--crop-size", "64",
    "--prefetch", "0", "--log-every", "0", "--no-progress",
]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """合成数据集 + 用 CLI 训练出的检查点"""
    root = tmp_path_factory.mktemp("cli")
    data = str(root / "data")
    assert main(["synth", "--seed", "1", "--count", "5", "--size", "64", "--val-fraction", "0.2", "--out", data]) == EXIT_OK
    ckpt = str(root / "model.bafnet")
    history = str(root / "history.json")
    code = main(["train", *TINY_FLAGS, *QUICK_TRAIN_FLAGS, "--data-root", data, "--out", ckpt, "--history", history])
    assert code == EXIT_OK
    image = str(root / "tile.png")
    write_rgb(image, (synth_generate(9, 1, 64)[0].image.transpose(1, 2, 0) * 255).astype(np.uint8))
    return {"root": root, "data": data, "ckpt": ckpt, "history": history, "image": image}


class TestSynth:
    def test_writes_train_and_val(self, workspace):
        assert len(os.listdir(os.path.join(workspace["data"], "train", "images"))) == 4
        assert len(os.listdir(os.path.join(workspace["data"], "val", "images"))) == 1


class TestTrain:
    def test_checkpoint_and_history(self, workspace):
        ckpt = load_checkpoint(workspace["ckpt"])
        assert ckpt.epoch == 1
        assert ckpt.model_config.rl_channels == 16
        with open(workspace["history"], encoding="utf-8") as f:
            history = json.load(f)
        assert len(history["records"]) == 1
        assert history["records"][0]["val_miou"] is not None

    def test_seed_is_required(self, tmp_path):
        code = main(["train", *TINY_FLAGS, "--synth-count", "4", "--synth-size", "64", "--out", str(tmp_path / "m.bafnet")])
        assert code == EXIT_USAGE

    def test_synthetic_data_without_disk(self, tmp_path):
        out = str(tmp_path / "m.bafnet")
        code = main(["train", *TINY_FLAGS, *QUICK_TRAIN_FLAGS, "--synth-count", "4", "--synth-size", "64", "--out", out])
        assert code == EXIT_OK
        assert os.path.exists(out)

    def test_needs_some_data(self, tmp_path):
        assert main(["train", *TINY_FLAGS, *QUICK_TRAIN_FLAGS, "--out", str(tmp_path / "m.bafnet")]) == EXIT_USAGE

    def test_missing_data_root(self, tmp_path):
        code = main(["train", *TINY_FLAGS, *QUICK_TRAIN_FLAGS, "--data-root", str(tmp_path / "none"), "--out", str(tmp_path / "m.bafnet")])
        assert code == EXIT_IO


class TestEvalPredict:
    def test_eval_writes_reports(self, workspace, tmp_path):
        report_json = str(tmp_path / "report.json")
        report_tsv = str(tmp_path / "report.tsv")
        code = main([
            "eval", "--checkpoint", workspace["ckpt"], "--data-root", workspace["data"], "--split", "val",
            "--report-json", report_json, "--report-tsv", report_tsv,
        ])
        assert code == EXIT_OK
        with open(report_json, encoding="utf-8") as f:
            values = json.load(f)
        assert 0.0 <= values["mIoU"] <= 1.0
        with open(report_tsv, encoding="utf-8") as f:
            assert f.readline().startswith("class\t")

    def test_eval_data_root_from_environment(self, workspace, monkeypatch):
        monkeypatch.setenv("DATA_ROOT", workspace["data"])
        assert main(["eval", "--checkpoint", workspace["ckpt"], "--split", "val"]) == EXIT_OK

    def test_predict_writes_palette_png(self, workspace, tmp_path):
        out = str(tmp_path / "pred.png")
        assert main(["predict", "--checkpoint", workspace["ckpt"], "--image", workspace["image"], "--out", out]) == EXIT_OK
        mask = DEFAULT_PALETTE.decode(read_rgb(out))
        assert mask.shape == (64, 64)

    def test_corrupt_checkpoint(self, workspace, tmp_path):
        bad = tmp_path / "bad.bafnet"
        bad.write_bytes(b"garbage")
        code = main(["predict", "--checkpoint", str(bad), "--image", workspace["image"], "--out", str(tmp_path / "p.png")])
        assert code == EXIT_IO

    def test_inspect_features(self, workspace, tmp_path):
        out_dir = str(tmp_path / "maps")
        code = main(["inspect-features", "--checkpoint", workspace["ckpt"], "--image", workspace["image"], "--out-dir", out_dir])
        assert code == EXIT_OK
        assert len(os.listdir(out_dir)) == 12


class TestInspect:
    def test_json_report(self, tmp_path):
        out = str(tmp_path / "cost.json")
        assert main(["inspect", *TINY_FLAGS, "--input-size", "64", "--depth", "1", "--json", out]) == EXIT_OK
        with open(out, encoding="utf-8") as f:
            report = json.load(f)
        assert report["input_shape"] == [1, 3, 64, 64]
        assert report["params"] > 0

    def test_preset_flag(self, tmp_path):
        out = str(tmp_path / "cost.json")
        assert main(["inspect", "--preset", "cp", *TINY_FLAGS, "--input-size", "64", "--json", out]) == EXIT_OK
        with open(out, encoding="utf-8") as f:
            names = {m["name"].split(".")[0] for m in json.load(f)["modules"]}
        assert "rl" not in names

    def test_bad_input_size(self):
        assert main(["inspect", *TINY_FLAGS, "--input-size", "48"]) == EXIT_USAGE

    def test_unknown_flag(self):
        assert main(["inspect", "--no-such-flag"]) == EXIT_USAGE

    def test_yaml_config_and_override(self, tmp_path):
        config = tmp_path / "exp.yaml"
        config.write_text("rl_channels: 16\nnum_heads: 2\nwindow_size: 2\n", encoding="utf-8")
        out = str(tmp_path / "cost.json")
        code = main(["inspect", "--config", str(config), "--dep-channels", "8", "16", "32", "32", "--input-size", "64", "--json", out])
        assert code == EXIT_OK

    def test_yaml_unknown_key(self, tmp_path):
        config = tmp_path / "exp.yaml"
        config.write_text("rl_chanels: 16\n", encoding="utf-8")
        assert main(["inspect", "--config", str(config)]) == EXIT_USAGE


class TestGradcheck:
    def test_operators_only(self):
        assert main(["gradcheck", "--seed", "2", "--no-end-to-end"]) == EXIT_OK
